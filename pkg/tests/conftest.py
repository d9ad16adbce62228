import numpy as np
import pytest

from advkit.model import Classifier
from advkit.training import TrainConfig, generate_synthetic, inner_attack, train_adversarial, train_standard

FRAGILE = dict(fragile_dims=16, fragile_amplitude=0.03, fragile_noise=0.0075)


class Desk:
    """A seeded victim model together with its train and test splits."""

    def __init__(self, name, model, train, test):
        self.name, self.model, self.train, self.test = name, model, train, test


@pytest.fixture(scope="session")
def blob_desk():
    """Standard MLP on well-separated Gaussian blobs (the smoke benchmark)."""
    train = generate_synthetic(10, 32, 200, 0.25, 0)
    test = generate_synthetic(10, 32, 30, 0.25, 0, split="test")
    init = Classifier.init([32, 64, 10], np.random.default_rng(1))
    model = train_standard(init, train, TrainConfig(epochs=20, learning_rate=0.1))
    return Desk("blob-standard", model, train, test)


@pytest.fixture(scope="session")
def fragile_data():
    train = generate_synthetic(10, 32, 200, 0.25, 0, **FRAGILE)
    test = generate_synthetic(10, 32, 30, 0.25, 0, split="test", **FRAGILE)
    return train, test


@pytest.fixture(scope="session")
def fragile_standard(fragile_data):
    train, test = fragile_data
    init = Classifier.init([32, 64, 10], np.random.default_rng(1))
    return Desk("fragile-standard", train_standard(init, train, TrainConfig(epochs=30, learning_rate=0.5)), train, test)


@pytest.fixture(scope="session")
def fragile_adversarial(fragile_data):
    train, test = fragile_data
    init = Classifier.init([32, 64, 10], np.random.default_rng(1))
    cfg = TrainConfig(epochs=30, learning_rate=0.5, adversarial=inner_attack(8 / 255))
    return Desk("fragile-adversarial", train_adversarial(init, train, cfg), train, test)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one ``criterion N: PASS/FAIL`` line, shown in the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
