"""Seeded victim models: synthetic data, SGD training and PGD adversarial training."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, AttackOutcome, Engine, attack, perturb
from .losses import LossConfig, LossKind, cross_entropy
from .model import Classifier
from .seeding import derive_seed, rng as seeded_rng


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not align")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, rows) -> "Dataset":
        return Dataset(self.inputs[rows], self.labels[rows], self.num_classes, self.split, dict(self.provenance))


def generate_synthetic(classes: int, dim: int, samples_per_class: int, spread: float, seed: int,
                       split: str = "train", fragile_dims: int = 0, fragile_amplitude: float = 0.02,
                       fragile_noise: float = 0.005) -> Dataset:
    """Balanced Gaussian blobs clipped to [0, 1].

    Class means depend only on ``seed``; ``split`` selects an independent
    sample stream around the same means. The last ``fragile_dims`` features
    are replaced by a per-class sign code of size ``fragile_amplitude``
    around 0.5: almost noiseless, hence very predictive, but small enough to
    be overwritten inside a modest L-infinity ball.
    """
    if classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if not 0 <= fragile_dims < dim:
        raise ValueError(f"fragile_dims must lie in [0, {dim}), got {fragile_dims}")
    means = seeded_rng(seed, "synthetic-means").uniform(0.2, 0.8, size=(classes, dim))
    if fragile_dims:
        code = seeded_rng(seed, "synthetic-code").choice([-1.0, 1.0], size=(classes, fragile_dims))
        means[:, dim - fragile_dims:] = 0.5 + fragile_amplitude * code
    gen = seeded_rng(seed, "synthetic-samples", {"train": 0, "test": 1}.get(split, 2))
    labels = np.repeat(np.arange(classes), samples_per_class)
    scale = np.full(dim, float(spread))
    scale[dim - fragile_dims:] = fragile_noise if fragile_dims else scale[dim - fragile_dims:]
    noise = gen.standard_normal((labels.size, dim))
    inputs = np.clip(means[labels] + scale * noise, 0, 1)
    order = gen.permutation(labels.size)
    return Dataset(inputs[order].astype(np.float32), labels[order], classes, split,
                   {"source": "synthetic", "seed": seed, "classes": classes, "dim": dim,
                    "samples_per_class": samples_per_class, "spread": spread,
                    "fragile_dims": fragile_dims, "fragile_amplitude": fragile_amplitude,
                    "fragile_noise": fragile_noise})


def inner_attack(epsilon: float) -> AttackConfig:
    """Conventional training-time attack: 7 PGD steps of size eps/4 on CE."""
    return AttackConfig(loss=LossConfig(kind=LossKind.CE), epsilon=epsilon, iterations=7,
                        restarts=1, step_size=epsilon / 4 if epsilon > 0 else None,
                        engine=Engine.PGD, track_best=False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    adversarial: AttackConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.adversarial is not None and self.adversarial.engine is not Engine.PGD:
            raise ValueError("adversarial training uses a PGD inner attack")


def batch_loss(model: Classifier, params, x, y) -> ad.Tensor:
    z = model.forward(x, params=params)
    return ad.scalar_mul(ad.sum_(cross_entropy(z, y)), 1.0 / len(y))


def _sgd(model: Classifier, dataset: Dataset, config: TrainConfig, adversarial: AttackConfig | None,
         history: list | None = None) -> Classifier:
    if len(dataset) == 0:
        raise ValueError("training split is empty")
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    lr = model.dtype.type(config.learning_rate)
    for epoch in range(config.epochs):
        order = seeded_rng(config.seed, "shuffle", epoch).permutation(len(dataset))
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start:start + config.batch_size]
            x, y = dataset.inputs[rows].astype(model.dtype), dataset.labels[rows]
            current = model.with_params(weights, biases)
            if adversarial is not None:
                inner = replace(adversarial, seed=derive_seed(config.seed, "adv-train", epoch, b))
                x = perturb(current, x, y, inner, indices=rows)
            params = current.param_tensors()
            try:
                loss = batch_loss(current, params, x, y)
                ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if history is not None:
                history.append(loss.item())
            for k, (w, bias) in enumerate(zip(*params)):
                weights[k] = weights[k] - lr * w.grad
                biases[k] = biases[k] - lr * bias.grad
    return model.with_params(weights, biases)


def train_standard(model: Classifier, dataset: Dataset, config: TrainConfig, history: list | None = None) -> Classifier:
    """Minibatch SGD on mean cross-entropy; shuffling is seeded per epoch."""
    return _sgd(model, dataset, config, None, history)


def train_adversarial(model: Classifier, dataset: Dataset, config: TrainConfig, history: list | None = None) -> Classifier:
    """Like :func:`train_standard`, but each minibatch is replaced by PGD examples first."""
    if config.adversarial is None:
        raise ValueError("adversarial training needs config.adversarial")
    return _sgd(model, dataset, config, config.adversarial, history)


@dataclass(frozen=True)
class Accuracy:
    clean: float
    robust: float
    outcomes: tuple[AttackOutcome, ...] = ()


def evaluate_accuracy(model: Classifier, dataset: Dataset, attack_config: AttackConfig | None = None) -> Accuracy:
    if len(dataset) == 0:
        raise ValueError("test split is empty")
    pred = model.predict_labels(dataset.inputs)
    clean = float(np.mean(pred == dataset.labels))
    if attack_config is None:
        return Accuracy(clean, clean)
    outcomes = attack(model, dataset.inputs, dataset.labels, attack_config)
    robust = float(np.mean([not o.success for o in outcomes]))
    return Accuracy(clean, robust, tuple(outcomes))


def robust_accuracy_curve(model: Classifier, dataset: Dataset, attack_config: AttackConfig,
                          epsilons) -> list[float]:
    """Robust accuracy over increasing radii.

    An example found at a smaller radius is also feasible at every larger one,
    so a sample broken at one radius counts as broken for all larger radii.
    """
    broken = np.zeros(len(dataset), dtype=bool)
    curve = []
    for eps in sorted(epsilons):
        step = None if attack_config.step_size is None else min(attack_config.step_size, eps) or None
        outcomes = attack(model, dataset.inputs, dataset.labels, replace(attack_config, epsilon=eps, step_size=step))
        broken |= np.array([o.success for o in outcomes])
        curve.append(float(np.mean(~broken)))
    return curve
