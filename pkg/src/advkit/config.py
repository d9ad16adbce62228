"""Experiment configuration: one JSON document per experiment.

``parse_config`` fills defaults and validates every field; errors name the
offending field with a dotted path such as ``attack.epsilon``.
``ExperimentConfig.to_dict`` emits the fully normalised document, and parsing
that document again yields an identical config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .attacks import DEFAULT_EPSILON, Engine
from .losses import ALPHA_OVERFLOW, NORMS, SIGMA_GRID, LossKind

COMMANDS = ("train", "attack", "analyze", "report")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


class UnknownKeyError(ConfigError):
    pass


class MissingFieldError(ConfigError):
    pass


class InvalidValueError(ConfigError):
    pass


class _Section:
    """Pops typed values out of one JSON object, tracking the dotted path."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise InvalidValueError(path or "<root>", f"expected an object, got {type(data).__name__}")
        self.data = dict(data)
        self.path = path

    def _name(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, kind, default=None, required=False, check=None, why=""):
        name = self._name(key)
        if key not in self.data or self.data[key] is None:
            self.data.pop(key, None)
            if required:
                raise MissingFieldError(name, "required field is missing")
            return default
        value = self.data.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and (not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool))):
            raise InvalidValueError(name, f"expected {getattr(kind, '__name__', kind)}, got {value!r}")
        if check is not None and not check(value):
            raise InvalidValueError(name, f"{why} (got {value!r})")
        return value

    def section(self, key: str, required=False):
        name = self._name(key)
        if key not in self.data or self.data[key] is None:
            self.data.pop(key, None)
            if required:
                raise MissingFieldError(name, "required section is missing")
            return _Section({}, name)
        return _Section(self.data.pop(key), name)

    def done(self) -> None:
        if self.data:
            key = sorted(self.data)[0]
            raise UnknownKeyError(self._name(key), "unknown key")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 32
    samples_per_class: int = 200
    test_samples_per_class: int = 30
    spread: float = 0.25
    fragile_dims: int = 0
    fragile_amplitude: float = 0.03
    fragile_noise: float = 0.0075
    train_files: tuple[str, ...] = ()
    test_file: str | None = None
    limit: int | None = None

    def to_dict(self) -> dict:
        if self.kind == "cifar10":
            return {"kind": "cifar10", "train_files": list(self.train_files), "test_file": self.test_file,
                    "limit": self.limit}
        return {"kind": "synthetic", "classes": self.classes, "dim": self.dim,
                "samples_per_class": self.samples_per_class,
                "test_samples_per_class": self.test_samples_per_class, "spread": self.spread,
                "fragile_dims": self.fragile_dims, "fragile_amplitude": self.fragile_amplitude,
                "fragile_noise": self.fragile_noise, "limit": self.limit}


@dataclass(frozen=True)
class InnerAttackSpec:
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 7
    step_size: float | None = None

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "iterations": self.iterations, "step_size": self.step_size}


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    adversarial: InnerAttackSpec | None = None

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "adversarial": None if self.adversarial is None else self.adversarial.to_dict()}


@dataclass(frozen=True)
class ModelSpec:
    id: str
    path: str
    hidden: tuple[int, ...] = (64,)
    logit_scale: float = 1.0
    train: TrainSpec | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "path": self.path, "hidden": list(self.hidden), "logit_scale": self.logit_scale,
                "train": None if self.train is None else self.train.to_dict()}


@dataclass(frozen=True)
class AttackSpec:
    engine: str = "apgd"
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 100
    restarts: int = 1
    step_size: float | None = None
    losses: tuple[str, ...] = ("ce", "cw", "dlr", "jitter")
    scale_alpha: float = 10.0
    sigma: float = 0.1
    norm: str = "l2"
    tune_sigma: bool = False
    sigma_grid: tuple[float, ...] = SIGMA_GRID
    tuning_samples: int = 100
    samples: int | None = None
    chunk_size: int = 64

    def to_dict(self) -> dict:
        return {"engine": self.engine, "epsilon": self.epsilon, "iterations": self.iterations,
                "restarts": self.restarts, "step_size": self.step_size, "losses": list(self.losses),
                "scale_alpha": self.scale_alpha, "sigma": self.sigma, "norm": self.norm,
                "tune_sigma": self.tune_sigma, "sigma_grid": list(self.sigma_grid),
                "tuning_samples": self.tuning_samples, "samples": self.samples, "chunk_size": self.chunk_size}


@dataclass(frozen=True)
class AnalysisSpec:
    landscape_t_max: float = 1.0
    landscape_steps: int = 41
    landscape_losses: tuple[str, ...] = ("ce", "jitter")
    csm_samples: int = 100
    channels: int = 1

    def to_dict(self) -> dict:
        return {"landscape_t_max": self.landscape_t_max, "landscape_steps": self.landscape_steps,
                "landscape_losses": list(self.landscape_losses), "csm_samples": self.csm_samples,
                "channels": self.channels}


@dataclass(frozen=True)
class ExperimentConfig:
    command: str | None = None
    seed: int = 0
    output_dir: str = "out"
    precision: int = 32
    threads: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    models: tuple[ModelSpec, ...] = ()
    attack: AttackSpec = field(default_factory=AttackSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "output_dir": self.output_dir,
                "precision": self.precision, "threads": self.threads, "dataset": self.dataset.to_dict(),
                "models": [m.to_dict() for m in self.models], "attack": self.attack.to_dict(),
                "analysis": self.analysis.to_dict()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _str_list(sec: _Section, key: str, default, allowed=None):
    values = sec.get(key, list, default=None)
    if values is None:
        return tuple(default)
    for i, v in enumerate(values):
        if not isinstance(v, str) or (allowed is not None and v not in allowed):
            raise InvalidValueError(f"{sec._name(key)}[{i}]", f"expected one of {sorted(allowed or [])}, got {v!r}")
    return tuple(values)


def _parse_dataset(sec: _Section) -> DatasetSpec:
    kind = sec.get("kind", str, "synthetic", check=lambda v: v in ("synthetic", "cifar10"),
                   why="must be 'synthetic' or 'cifar10'")
    limit = sec.get("limit", int, None, check=_positive, why="must be positive")
    if kind == "cifar10":
        train_files = _str_list(sec, "train_files", ())
        test_file = sec.get("test_file", str, required=True)
        sec.done()
        return DatasetSpec(kind=kind, train_files=train_files, test_file=test_file, limit=limit)
    d = DatasetSpec()
    classes = sec.get("classes", int, d.classes, check=lambda v: v >= 2, why="must be >= 2")
    dim = sec.get("dim", int, d.dim, check=lambda v: v >= 2, why="must be >= 2")
    spec = DatasetSpec(
        kind=kind, classes=classes, dim=dim,
        samples_per_class=sec.get("samples_per_class", int, d.samples_per_class, check=_positive, why="must be positive"),
        test_samples_per_class=sec.get("test_samples_per_class", int, d.test_samples_per_class, check=_positive,
                                       why="must be positive"),
        spread=sec.get("spread", float, d.spread, check=_non_negative, why="must be non-negative"),
        fragile_dims=sec.get("fragile_dims", int, d.fragile_dims, check=lambda v: 0 <= v < dim,
                             why=f"must lie in [0, {dim})"),
        fragile_amplitude=sec.get("fragile_amplitude", float, d.fragile_amplitude, check=_non_negative,
                                  why="must be non-negative"),
        fragile_noise=sec.get("fragile_noise", float, d.fragile_noise, check=_non_negative, why="must be non-negative"),
        limit=limit)
    sec.done()
    return spec


def _parse_inner(sec: _Section) -> InnerAttackSpec:
    eps = sec.get("epsilon", float, DEFAULT_EPSILON, check=_non_negative, why="must be non-negative")
    spec = InnerAttackSpec(
        epsilon=eps,
        iterations=sec.get("iterations", int, 7, check=_positive, why="must be >= 1"),
        step_size=sec.get("step_size", float, None, check=lambda v: 0 < v <= eps, why="must satisfy 0 < step_size <= epsilon"))
    sec.done()
    return spec


def _parse_train(sec: _Section) -> TrainSpec:
    adversarial = None
    if sec.data.get("adversarial") is not None:
        adversarial = _parse_inner(sec.section("adversarial"))
    else:
        sec.data.pop("adversarial", None)
    spec = TrainSpec(
        epochs=sec.get("epochs", int, 30, check=_non_negative, why="must be non-negative"),
        batch_size=sec.get("batch_size", int, 64, check=_positive, why="must be positive"),
        learning_rate=sec.get("learning_rate", float, 0.1, check=_positive, why="must be positive"),
        adversarial=adversarial)
    sec.done()
    return spec


def _parse_model(sec: _Section) -> ModelSpec:
    hidden = sec.get("hidden", list, [64])
    for i, h in enumerate(hidden):
        if not isinstance(h, int) or isinstance(h, bool) or h < 1:
            raise InvalidValueError(f"{sec._name('hidden')}[{i}]", f"expected a positive integer, got {h!r}")
    train = None
    if sec.data.get("train") is not None:
        train = _parse_train(sec.section("train"))
    else:
        sec.data.pop("train", None)
    spec = ModelSpec(
        id=sec.get("id", str, required=True, check=lambda v: v and "/" not in v and "," not in v,
                   why="must be a non-empty name without '/' or ','"),
        path=sec.get("path", str, required=True),
        hidden=tuple(hidden),
        logit_scale=sec.get("logit_scale", float, 1.0, check=_positive, why="must be positive"),
        train=train)
    sec.done()
    return spec


def _parse_attack(sec: _Section) -> AttackSpec:
    d = AttackSpec()
    eps = sec.get("epsilon", float, d.epsilon, check=_non_negative, why="must be non-negative")
    engine = sec.get("engine", str, d.engine, check=lambda v: v in [e.value for e in Engine],
                     why="must be 'pgd' or 'apgd'")
    iterations = sec.get("iterations", int, d.iterations,
                         check=lambda v: v >= (5 if engine == "apgd" else 1),
                         why="must be >= 1 (>= 5 for apgd)")
    grid = sec.get("sigma_grid", list, list(d.sigma_grid))
    for i, g in enumerate(grid):
        if isinstance(g, bool) or not isinstance(g, (int, float)) or g < 0:
            raise InvalidValueError(f"{sec._name('sigma_grid')}[{i}]", f"expected a non-negative number, got {g!r}")
    spec = AttackSpec(
        engine=engine, epsilon=eps, iterations=iterations,
        restarts=sec.get("restarts", int, d.restarts, check=_positive, why="must be >= 1"),
        step_size=sec.get("step_size", float, None, check=lambda v: 0 < v <= eps,
                          why="must satisfy 0 < step_size <= epsilon"),
        losses=_str_list(sec, "losses", d.losses, allowed=[k.value for k in LossKind]),
        scale_alpha=sec.get("scale_alpha", float, d.scale_alpha, check=lambda v: 0 < v < ALPHA_OVERFLOW,
                            why=f"must lie in (0, {ALPHA_OVERFLOW:g}); larger values overflow float32 softmax"),
        sigma=sec.get("sigma", float, d.sigma, check=_non_negative, why="must be non-negative"),
        norm=sec.get("norm", str, d.norm, check=lambda v: v in NORMS, why=f"must be one of {sorted(NORMS)}"),
        tune_sigma=sec.get("tune_sigma", bool, d.tune_sigma),
        sigma_grid=tuple(float(g) for g in grid),
        tuning_samples=sec.get("tuning_samples", int, d.tuning_samples, check=_positive, why="must be positive"),
        samples=sec.get("samples", int, None, check=_positive, why="must be positive"),
        chunk_size=sec.get("chunk_size", int, d.chunk_size, check=_positive, why="must be positive"))
    sec.done()
    return spec


def _parse_analysis(sec: _Section) -> AnalysisSpec:
    d = AnalysisSpec()
    spec = AnalysisSpec(
        landscape_t_max=sec.get("landscape_t_max", float, d.landscape_t_max, check=_positive, why="must be positive"),
        landscape_steps=sec.get("landscape_steps", int, d.landscape_steps, check=lambda v: v >= 2, why="must be >= 2"),
        landscape_losses=_str_list(sec, "landscape_losses", d.landscape_losses, allowed=[k.value for k in LossKind]),
        csm_samples=sec.get("csm_samples", int, d.csm_samples, check=_non_negative, why="must be non-negative"),
        channels=sec.get("channels", int, d.channels, check=_positive, why="must be positive"))
    sec.done()
    return spec


def config_from_dict(data: dict) -> ExperimentConfig:
    root = _Section(data, "")
    command = root.get("command", str, None, check=lambda v: v in COMMANDS, why=f"must be one of {list(COMMANDS)}")
    seed = root.get("seed", int, 0, check=lambda v: 0 <= v < 2 ** 64, why="must be an unsigned 64-bit integer")
    output_dir = root.get("output_dir", str, "out")
    precision = root.get("precision", int, 32, check=lambda v: v in (32, 64), why="must be 32 or 64")
    threads = root.get("threads", int, 1, check=_positive, why="must be positive")
    dataset = _parse_dataset(root.section("dataset"))
    raw_models = root.get("models", list, [])
    models = tuple(_parse_model(_Section(m, f"models[{i}]")) for i, m in enumerate(raw_models))
    ids = [m.id for m in models]
    if len(set(ids)) != len(ids):
        raise InvalidValueError("models", f"model ids must be unique, got {ids}")
    attack = _parse_attack(root.section("attack"))
    analysis = _parse_analysis(root.section("analysis"))
    root.done()
    return ExperimentConfig(command=command, seed=seed, output_dir=output_dir, precision=precision,
                            threads=threads, dataset=dataset, models=models, attack=attack, analysis=analysis)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
