"""Untargeted L-infinity attacks: vanilla PGD and APGD with best-point tracking.

Attacks run on chunks of samples at once. Every sample owns its random
stream, keyed by ``(seed, restart, sample index)``, so outcomes do not depend
on how samples are chunked or which worker runs them.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import SIGMA_GRID, LossConfig, LossKind, attack_loss, draw_noise, loss_values
from .model import Classifier
from .seeding import sample_rng

DEFAULT_EPSILON = 8 / 255


class Engine(str, enum.Enum):
    PGD = "pgd"
    APGD = "apgd"


@dataclass(frozen=True)
class AttackConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 100
    restarts: int = 1
    step_size: float | None = None
    engine: Engine = Engine.APGD
    seed: int = 0
    track_best: bool = True
    record_trace: bool = False
    record_iterates: bool = False
    chunk_size: int = 64
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "engine", Engine(self.engine))
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_size is not None and not (0 < self.step_size <= self.epsilon or self.step_size == self.epsilon == 0):
            raise ValueError(f"step_size must satisfy 0 < step_size <= epsilon, got {self.step_size}")
        if self.engine is Engine.APGD and self.iterations < 5:
            raise ValueError("APGD needs at least 5 iterations")
        if self.chunk_size < 1 or self.threads < 1:
            raise ValueError("chunk_size and threads must be positive")

    @property
    def pgd_step_size(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    label: int
    success: bool
    clean_pred: int
    adv_pred: int
    l2_norm: float
    linf_norm: float
    first_success_iter: int | None
    loss: float
    trace: np.ndarray | None = None
    iterates: np.ndarray | None = None


@dataclass
class BestPoint:
    """A candidate adversarial point with what the ordering needs to know about it."""
    x: np.ndarray
    success: bool
    norm: float
    loss: float


def better(success, norm, loss, best_success, best_norm, best_loss):
    """Mask of candidates that replace the current best.

    Success beats failure; among successes the smaller norm wins; among
    failures the higher noiseless loss wins. Ties keep the incumbent.
    """
    success, best_success = np.asarray(success), np.asarray(best_success)
    return ((success & ~best_success)
            | (success & best_success & (np.asarray(norm) < best_norm))
            | (~success & ~best_success & (np.asarray(loss) > best_loss)))


def track_best(current: BestPoint | None, candidate: BestPoint) -> BestPoint:
    if current is None:
        return candidate
    if better(candidate.success, candidate.norm, candidate.loss,
              current.success, current.norm, current.loss):
        return candidate
    return current


def project_linf(candidate, x, epsilon: float) -> np.ndarray:
    candidate = np.asarray(candidate)
    x = np.asarray(x, dtype=candidate.dtype)
    eps = candidate.dtype.type(epsilon)
    return np.clip(np.clip(candidate, x - eps, x + eps), 0, 1)


def random_start(x, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    u = rng.uniform(-epsilon, epsilon, size=x.shape).astype(x.dtype)
    return project_linf(x + u, x, epsilon)


def pgd_step(x_adv, gradient, step_size: float, x, epsilon: float) -> np.ndarray:
    gradient = np.asarray(gradient)
    if not np.all(np.isfinite(gradient)):
        raise ad.NonFiniteError("non-finite attack gradient")
    x_adv = np.asarray(x_adv)
    return project_linf(x_adv + x_adv.dtype.type(step_size) * np.sign(gradient).astype(x_adv.dtype), x, epsilon)


def perturbation_norm(gamma: np.ndarray, p: float) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    return np.linalg.norm(gamma.reshape(gamma.shape[0], -1), ord=p, axis=1)


class _Chunk:
    """State of one batched attack run over a chunk of samples."""

    def __init__(self, model: Classifier, x, y, indices, config: AttackConfig, restart: int):
        self.model = model
        self.x = np.asarray(x, dtype=model.dtype)
        self.y = np.asarray(y, dtype=np.int64)
        self.config = config
        self.cfg = config.loss
        self.rngs = [sample_rng(config.seed, restart, int(i)) for i in indices]
        n = len(self.y)
        self.best_x = self.x.copy()
        self.best_success = np.zeros(n, dtype=bool)
        self.best_norm = np.full(n, np.inf)
        self.best_loss = np.full(n, -np.inf)
        self.first_success = np.full(n, -1)
        self.trace: list[np.ndarray] = []
        self.iterates: list[np.ndarray] = []
        self.last_x = self.x.copy()
        self.last_success = np.zeros(n, dtype=bool)
        self.last_loss = np.full(n, -np.inf)

    def loss_and_grad(self, x_adv: np.ndarray):
        """Objective (noise included) and its input gradient at ``x_adv``."""
        leaf = Tensor(x_adv, requires_grad=True)
        z = self.model.forward(leaf)
        gamma = ad.sub(leaf, Tensor(self.x)) if self.cfg.kind is LossKind.JITTER else None
        noise = None
        if self.cfg.kind in (LossKind.NOISE, LossKind.JITTER):
            noise = draw_noise(z.shape, self.cfg.sigma, self.rngs, z.dtype)
        loss = attack_loss(z, self.y, self.cfg, gamma=gamma, noise=noise)
        ad.backward(ad.sum_(loss))
        g = leaf.grad if leaf.grad is not None else np.zeros_like(x_adv)
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("non-finite attack gradient")
        return z.data, loss.data.astype(np.float64), g

    def observe(self, x_adv: np.ndarray, z: np.ndarray, t: int, loss: np.ndarray | None = None) -> None:
        """Record iterate ``t`` with its noiseless logits ``z``."""
        success = np.argmax(z, axis=1) != self.y
        gamma = x_adv - self.x
        norm = perturbation_norm(gamma, self.cfg.p)
        clean_loss = loss_values(z, self.y, self.cfg, gamma=gamma).astype(np.float64)
        swap = better(success, norm, clean_loss, self.best_success, self.best_norm, self.best_loss)
        self.best_x[swap] = x_adv[swap]
        self.best_success[swap] = success[swap]
        self.best_norm[swap] = norm[swap]
        self.best_loss[swap] = clean_loss[swap]
        newly = success & (self.first_success < 0)
        self.first_success[newly] = t
        self.last_x = x_adv.copy()
        self.last_success = success
        self.last_loss = clean_loss
        if loss is not None and self.config.record_trace:
            self.trace.append(loss.copy())
        if self.config.record_iterates:
            self.iterates.append(x_adv.copy())

    def result(self):
        if self.config.track_best:
            return self.best_x, self.best_success, self.best_loss
        return self.last_x, self.last_success, self.last_loss

    def start(self) -> np.ndarray:
        eps = self.config.epsilon
        return np.stack([random_start(xi, eps, rng) for xi, rng in zip(self.x, self.rngs)])


def _run_pgd_chunk(chunk: _Chunk) -> _Chunk:
    cfg = chunk.config
    x_adv = chunk.start()
    for t in range(cfg.iterations):
        z, loss, g = chunk.loss_and_grad(x_adv)
        chunk.observe(x_adv, z, t, loss)
        x_adv = pgd_step(x_adv, g, cfg.pgd_step_size, chunk.x, cfg.epsilon)
    chunk.observe(x_adv, chunk.model.logits(x_adv), cfg.iterations)
    return chunk


def apgd_checkpoints(iterations: int) -> list[int]:
    """Iterations at which APGD reconsiders its step size."""
    first = max(int(0.22 * iterations), 1)
    shortest = max(int(0.06 * iterations), 1)
    decrease = max(int(0.03 * iterations), 1)
    points, k, i = [], first, first
    while i <= iterations:
        points.append(i)
        k = max(k - decrease, shortest)
        i += k
    return points


def _run_apgd_chunk(chunk: _Chunk) -> _Chunk:
    cfg = chunk.config
    eps = cfg.epsilon
    checkpoints = apgd_checkpoints(cfg.iterations)
    thr_decr = 0.75

    x = chunk.x
    x_adv = chunk.start()
    z, loss, grad = chunk.loss_and_grad(x_adv)
    chunk.observe(x_adv, z, 0, loss)

    n = len(chunk.y)
    dtype = x.dtype
    step = np.full((n, 1), 2 * eps, dtype=dtype)
    x_best, grad_best = x_adv.copy(), grad.copy()
    loss_best = loss.copy()
    loss_steps = [loss.copy()]
    x_adv_old = x_adv.copy()
    last_check = 0
    loss_best_last_check = loss_best.copy()
    reduced_last_check = np.ones(n, dtype=bool)

    for i in range(cfg.iterations):
        momentum = x_adv - x_adv_old
        x_adv_old = x_adv.copy()
        a = dtype.type(0.75 if i > 0 else 1.0)
        if not np.all(np.isfinite(grad)):
            raise ad.NonFiniteError("non-finite attack gradient")
        x_1 = project_linf(x_adv + step * np.sign(grad).astype(dtype), x, eps)
        x_adv = project_linf(x_adv + (x_1 - x_adv) * a + momentum * (1 - a), x, eps)

        z, loss, grad = chunk.loss_and_grad(x_adv)
        chunk.observe(x_adv, z, i + 1, loss)
        loss_steps.append(loss.copy())

        improved = loss > loss_best
        x_best[improved] = x_adv[improved]
        grad_best[improved] = grad[improved]
        loss_best[improved] = loss[improved]

        if i + 1 in checkpoints:
            k = i + 1 - last_check
            last_check = i + 1
            recent = np.array(loss_steps[-k - 1:])
            increases = (recent[1:] > recent[:-1]).sum(axis=0)
            oscillating = increases <= k * thr_decr
            stalled = ~reduced_last_check & (loss_best_last_check >= loss_best)
            halve = oscillating | stalled
            reduced_last_check = halve.copy()
            loss_best_last_check = loss_best.copy()
            if halve.any():
                step[halve] /= 2
                x_adv[halve] = x_best[halve]
                grad[halve] = grad_best[halve]
    return chunk


_ENGINES = {Engine.PGD: _run_pgd_chunk, Engine.APGD: _run_apgd_chunk}


def _chunks(n: int, size: int):
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def _attack_once(model: Classifier, x, y, config: AttackConfig, restart: int, indices) -> list[AttackOutcome]:
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    clean_pred = model.predict_labels(x) if len(x) else np.zeros(0, dtype=np.int64)
    indices = np.asarray(indices)
    attacked = np.flatnonzero(clean_pred == y)
    engine = _ENGINES[config.engine]

    def run(part):
        rows = attacked[part]
        return rows, engine(_Chunk(model, x[rows], y[rows], indices[rows], config, restart))

    parts = _chunks(len(attacked), config.chunk_size)
    if config.threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            finished = list(pool.map(run, parts))
    else:
        finished = [run(p) for p in parts]

    outcomes: list[AttackOutcome | None] = [None] * len(y)
    for i in np.flatnonzero(clean_pred != y):
        outcomes[i] = AttackOutcome(
            x_adv=x[i].copy(), label=int(y[i]), success=True, clean_pred=int(clean_pred[i]),
            adv_pred=int(clean_pred[i]), l2_norm=0.0, linf_norm=0.0, first_success_iter=0,
            loss=float(loss_values(model.logits(x[i:i + 1]), y[i:i + 1], config.loss,
                                   gamma=np.zeros_like(x[i:i + 1]))[0]))
    for rows, chunk in finished:
        x_out, success, best_loss = chunk.result()
        adv_pred = model.predict_labels(x_out)
        gamma = x_out - chunk.x
        l2 = perturbation_norm(gamma, 2)
        linf = perturbation_norm(gamma, np.inf)
        trace = np.array(chunk.trace).T if config.record_trace else None
        iterates = np.stack(chunk.iterates, axis=1) if config.record_iterates else None
        for j, row in enumerate(rows):
            first = int(chunk.first_success[j])
            outcomes[row] = AttackOutcome(
                x_adv=x_out[j].copy(), label=int(y[row]), success=bool(adv_pred[j] != y[row]),
                clean_pred=int(clean_pred[row]), adv_pred=int(adv_pred[j]),
                l2_norm=float(l2[j]), linf_norm=float(linf[j]),
                first_success_iter=first if first >= 0 else None, loss=float(best_loss[j]),
                trace=None if trace is None else trace[j],
                iterates=None if iterates is None else iterates[j])
    return outcomes  # type: ignore[return-value]


def attack(model: Classifier, x, y, config: AttackConfig, indices: Sequence[int] | None = None) -> list[AttackOutcome]:
    """Run ``config.restarts`` independent runs and keep the best outcome per sample."""
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if x.shape[1] != model.input_dim:
        raise ad.ShapeError(f"inputs have {x.shape[1]} features, model expects {model.input_dim}")
    indices = np.arange(len(y)) if indices is None else np.asarray(indices)
    best = _attack_once(model, x, y, config, 0, indices)
    p = config.loss.p
    for r in range(1, config.restarts):
        candidate = _attack_once(model, x, y, config, r, indices)
        for i, (cur, new) in enumerate(zip(best, candidate)):
            n_cur = perturbation_norm((cur.x_adv - x[i])[None], p)[0]
            n_new = perturbation_norm((new.x_adv - x[i])[None], p)[0]
            if better(new.success, n_new, new.loss, cur.success, n_cur, cur.loss):
                best[i] = new
    return best


def run_pgd(model: Classifier, x, y, config: AttackConfig, indices=None) -> list[AttackOutcome]:
    if config.engine is not Engine.PGD:
        config = replace(config, engine=Engine.PGD)
    return _attack_once(model, np.atleast_2d(x), np.atleast_1d(y), config, 0,
                        np.arange(len(np.atleast_1d(y))) if indices is None else indices)


def run_apgd(model: Classifier, x, y, config: AttackConfig, indices=None) -> list[AttackOutcome]:
    if config.engine is not Engine.APGD:
        config = replace(config, engine=Engine.APGD)
    return _attack_once(model, np.atleast_2d(x), np.atleast_1d(y), config, 0,
                        np.arange(len(np.atleast_1d(y))) if indices is None else indices)


run_with_restarts = attack


def perturb(model: Classifier, x, y, config: AttackConfig, indices=None, restart: int = 0) -> np.ndarray:
    """Adversarial inputs for every row, including rows already misclassified.

    Used for training-time example generation, where no outcome bookkeeping
    is needed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    indices = np.arange(len(y)) if indices is None else np.asarray(indices)
    chunk = _ENGINES[config.engine](_Chunk(model, x, y, indices, config, restart))
    return chunk.result()[0]


def tune_sigma(model: Classifier, x, y, config: AttackConfig, grid=None, indices=None) -> tuple[float, dict[float, float]]:
    """Pick the noise magnitude with the highest success rate on a small batch.

    Ties go to the smaller magnitude.
    """
    rates: dict[float, float] = {}
    best_sigma, best_rate = None, -1.0
    for sigma in sorted(SIGMA_GRID if grid is None else grid):
        cfg = replace(config, loss=replace(config.loss, sigma=float(sigma)))
        outcomes = attack(model, x, y, cfg, indices=indices)
        rate = float(np.mean([o.success for o in outcomes])) if outcomes else 0.0
        rates[float(sigma)] = rate
        if rate > best_rate:
            best_sigma, best_rate = float(sigma), rate
    return best_sigma, rates
