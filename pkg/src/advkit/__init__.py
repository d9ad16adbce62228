"""Seeded white-box adversarial attacks and robustness diagnostics on numpy."""

__version__ = "0.1.0"
