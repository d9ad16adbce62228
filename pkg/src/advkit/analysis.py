"""Diagnostics over attack outcomes and models, returned as plain data."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attacks import AttackOutcome
from .losses import cw_loss, stable_softmax_np
from .model import Classifier

VARIANTS = ("all", "misclassified-only", "binarized")


@dataclass
class ConfusionMatrix:
    """Rows index the clean prediction, columns the adversarial prediction."""
    counts: np.ndarray
    variant: str = "all"

    def to_dict(self) -> dict:
        return {"variant": self.variant, "counts": self.counts.tolist()}

    @property
    def off_diagonal_nonzero(self) -> int:
        c = self.counts.copy()
        np.fill_diagonal(c, 0)
        return int(np.count_nonzero(c))


def confusion(outcomes: Sequence[AttackOutcome], num_classes: int, variant: str = "all") -> ConfusionMatrix:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for o in outcomes:
        counts[o.clean_pred, o.adv_pred] += 1
    if variant != "all":
        np.fill_diagonal(counts, 0)
    if variant == "binarized":
        counts = (counts > 0).astype(np.int64)
    return ConfusionMatrix(counts, variant)


def average_confusions(matrices: Sequence[ConfusionMatrix | np.ndarray]) -> np.ndarray:
    arrays = [np.asarray(m.counts if isinstance(m, ConfusionMatrix) else m, dtype=np.float64) for m in matrices]
    if not arrays:
        raise ValueError("need at least one matrix")
    if len({a.shape for a in arrays}) != 1:
        raise ValueError(f"confusion matrices disagree in shape: {sorted({a.shape for a in arrays})}")
    return np.mean(arrays, axis=0)


@dataclass
class RobustnessPartition:
    counts: np.ndarray
    models: int

    @property
    def robust(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 0)

    @property
    def non_robust(self) -> np.ndarray:
        return np.flatnonzero(self.counts == self.models)

    @property
    def intermediate(self) -> np.ndarray:
        return np.flatnonzero((self.counts > 0) & (self.counts < self.models))

    @property
    def histogram(self) -> np.ndarray:
        return np.bincount(self.counts, minlength=self.models + 1)

    def to_dict(self) -> dict:
        return {"models": self.models, "histogram": self.histogram.tolist(),
                "robust": int(self.robust.size), "non_robust": int(self.non_robust.size),
                "intermediate": int(self.intermediate.size)}


def partition_robustness(per_model: Sequence[Sequence[AttackOutcome]]) -> RobustnessPartition:
    """Count, per sample, how many models misclassify its attacked version."""
    if not per_model:
        raise ValueError("need outcomes from at least one model")
    sizes = {len(o) for o in per_model}
    if len(sizes) != 1:
        raise ValueError(f"outcome lists differ in length: {sorted(sizes)}")
    counts = np.sum([[o.success for o in outcomes] for outcomes in per_model], axis=0).astype(np.int64)
    return RobustnessPartition(np.atleast_1d(counts), len(per_model))


def class_distribution(partition: RobustnessPartition, labels, num_classes: int) -> dict:
    labels = np.asarray(labels)
    return {"robust": np.bincount(labels[partition.robust], minlength=num_classes),
            "non_robust": np.bincount(labels[partition.non_robust], minlength=num_classes)}


def chi_square(a, b) -> float:
    """Pearson statistic of a 2 x C contingency table; empty columns are dropped."""
    table = np.array([a, b], dtype=np.float64)
    table = table[:, table.sum(axis=0) > 0]
    total = table.sum()
    if total == 0 or table.shape[1] == 0:
        return 0.0
    rows = table.sum(axis=1, keepdims=True)
    expected = rows * table.sum(axis=0, keepdims=True) / total
    mask = expected > 0
    return float((((table - expected) ** 2)[mask] / expected[mask]).sum())


@dataclass
class BoxSummary:
    """Quartiles plus whiskers spanning the central 95% of values."""
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    mean: float
    std: float
    count: int

    @classmethod
    def of(cls, values) -> "BoxSummary":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            nan = float("nan")
            return cls(nan, nan, nan, nan, nan, nan, nan, 0)
        q1, med, q3, lo, hi = np.percentile(v, [25, 50, 75, 2.5, 97.5])
        return cls(float(q1), float(med), float(q3), float(lo), float(hi), float(v.mean()), float(v.std()), int(v.size))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LogitStats:
    logits: BoxSummary
    confidence: BoxSummary

    def to_dict(self) -> dict:
        return {"logits": self.logits.to_dict(), "confidence": self.confidence.to_dict()}


def logit_stats(model: Classifier, inputs) -> LogitStats:
    z = model.logits(inputs)
    probs = stable_softmax_np(z)
    return LogitStats(BoxSummary.of(z), BoxSummary.of(probs.max(axis=1)))


@dataclass
class CsmEntry:
    matrix: np.ndarray
    mean: float
    zero_gradient: np.ndarray


def cosine_similarity_matrix(gradients: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(gradients, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1)
    zero = norms == 0
    unit = np.where(zero[:, None], 0.0, g / np.where(zero, 1.0, norms)[:, None])
    csm = np.clip(unit @ unit.T, -1.0, 1.0)
    csm = (csm + csm.T) / 2
    diag = np.where(zero, 0.0, 1.0)
    np.fill_diagonal(csm, diag)
    return csm, zero


def csm(model: Classifier, x) -> CsmEntry:
    """Cosine similarities between the input gradients of every class logit."""
    matrix, zero = cosine_similarity_matrix(model.class_gradients(x))
    c = matrix.shape[0]
    off = matrix[~np.eye(c, dtype=bool)]
    return CsmEntry(matrix, float(off.mean()) if off.size else 0.0, zero)


@dataclass
class CsmStats:
    means: np.ndarray
    robust: BoxSummary
    non_robust: BoxSummary

    def to_dict(self) -> dict:
        return {"overall": BoxSummary.of(self.means).to_dict(), "robust": self.robust.to_dict(),
                "non_robust": self.non_robust.to_dict()}


def csm_stats(model: Classifier, inputs, partition: RobustnessPartition | None = None) -> CsmStats:
    means = np.array([csm(model, x).mean for x in np.asarray(inputs)])
    if partition is None:
        empty = BoxSummary.of([])
        return CsmStats(means, empty, empty)
    return CsmStats(means, BoxSummary.of(means[partition.robust]), BoxSummary.of(means[partition.non_robust]))


@dataclass
class LandscapeCurve:
    t: np.ndarray
    values: np.ndarray
    crossing: float | None

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "values": self.values.tolist(), "crossing": self.crossing}


def first_crossing(t, values) -> float | None:
    above = np.flatnonzero(np.asarray(values) > 0)
    return float(np.asarray(t)[above[0]]) if above.size else None


def cw_along(model: Classifier, x, direction, y: int, t) -> np.ndarray:
    """CW loss at ``clip(x + t * direction, 0, 1)`` for every ``t``."""
    x = np.asarray(x, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    points = np.clip(x[None, :] + t[:, None] * np.asarray(direction, dtype=np.float64)[None, :], 0, 1)
    z = model.logits(points.astype(model.dtype))
    return cw_loss(z, np.full(len(t), y)).data.astype(np.float64)


def landscape(model: Classifier, x, gamma, y: int, t_max: float, steps: int) -> LandscapeCurve:
    """CW loss along the unit direction of ``gamma``, from the clean input outwards."""
    gamma = np.asarray(gamma, dtype=np.float64)
    norm = np.linalg.norm(gamma)
    if norm == 0:
        raise ValueError("landscape needs a nonzero perturbation")
    t = np.linspace(0.0, t_max, steps)
    values = cw_along(model, x, gamma / norm, y, t)
    return LandscapeCurve(t, values, first_crossing(t, values))


def mean_curve(curves: Sequence[LandscapeCurve]) -> LandscapeCurve:
    if not curves:
        raise ValueError("need at least one curve")
    t = curves[0].t
    values = np.mean([c.values for c in curves], axis=0)
    return LandscapeCurve(t, values, first_crossing(t, values))


@dataclass
class NormStats:
    l2: BoxSummary
    linf: BoxSummary
    successes: int
    total: int

    def to_dict(self) -> dict:
        return {"l2": self.l2.to_dict(), "linf": self.linf.to_dict(), "successes": self.successes, "total": self.total}


def attacked_successes(outcomes: Sequence[AttackOutcome]) -> list[AttackOutcome]:
    """Successful outcomes on samples the model classified correctly before the attack."""
    return [o for o in outcomes if o.success and o.clean_pred == o.label]


def norm_stats(outcomes_by_loss: Mapping[str, Sequence[AttackOutcome]]) -> dict[str, NormStats]:
    out = {}
    for loss, outcomes in outcomes_by_loss.items():
        hits = attacked_successes(outcomes)
        out[loss] = NormStats(BoxSummary.of([o.l2_norm for o in hits]), BoxSummary.of([o.linf_norm for o in hits]),
                              len(hits), len(outcomes))
    return out


def perturbation_magnitude(x, x_adv, channels: int = 1) -> np.ndarray:
    """Per-pixel absolute perturbation summed over channel planes.

    Inputs are laid out channel-major, as in the CIFAR-10 binary format.
    """
    gamma = np.abs(np.asarray(x_adv, dtype=np.float64) - np.asarray(x, dtype=np.float64))
    if gamma.shape[-1] % channels:
        raise ValueError(f"{gamma.shape[-1]} features do not split into {channels} channels")
    return gamma.reshape(*gamma.shape[:-1], channels, -1).sum(axis=-2)


@dataclass
class AnalysisReport:
    sections: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self.sections
