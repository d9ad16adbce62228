"""Attack objectives over batched logits.

Every loss takes logits ``z`` of shape ``(B, C)`` and integer labels ``y`` of
shape ``(B,)`` and returns a ``(B,)`` tensor of per-sample values. Attacks
maximise these values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# softmax(alpha * z / ||z||_inf) overflows float32 near this value
ALPHA_OVERFLOW = 83.0
SIGMA_GRID = (0.0, 0.05, 0.1, 0.15, 0.2)


class LossKind(str, enum.Enum):
    CE = "ce"
    CW = "cw"
    DLR = "dlr"
    CE_SCALED = "ce-scaled"
    L2_SCALED = "l2-scaled"
    NOISE = "noise"
    JITTER = "jitter"


NORMS = {"l1": 1, "l2": 2, "linf": np.inf}


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.JITTER
    scale_alpha: float = 10.0
    sigma: float = 0.0
    norm: str = "l2"
    norm_floor: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not 0 < self.scale_alpha < ALPHA_OVERFLOW:
            raise ValueError(f"scale_alpha must lie in (0, {ALPHA_OVERFLOW:g}), got {self.scale_alpha}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {sorted(NORMS)}, got {self.norm!r}")
        if not self.norm_floor > 0:
            raise ValueError(f"norm_floor must be positive, got {self.norm_floor}")

    @property
    def p(self) -> float:
        return NORMS[self.norm]

    @property
    def stochastic(self) -> bool:
        return self.kind in (LossKind.NOISE, LossKind.JITTER) and self.sigma > 0

    def noiseless(self) -> "LossConfig":
        return replace(self, sigma=0.0)


def _as_batch(z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim != 2:
        raise ad.ShapeError(f"expected (B, C) logits, got shape {z.shape}")
    return z


def one_hot(y, num_classes: int, dtype=np.float32) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any((y < 0) | (y >= num_classes)):
        raise IndexError(f"labels {y} out of range for {num_classes} classes")
    out = np.zeros((y.size, num_classes), dtype=dtype)
    out[np.arange(y.size), y] = 1
    return out


def _true_logit(z: Tensor, onehot: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(z, onehot), axis=1)


def cross_entropy(z, y) -> Tensor:
    """``-log softmax(z)_y`` in log-sum-exp form; saturates to exactly 0."""
    z = _as_batch(z)
    onehot = one_hot(y, z.shape[1], z.dtype)
    m = ad.max_reduce(z, axis=1, keepdims=True)
    shifted = ad.sub(z, m)
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=1))
    return ad.sub(lse, _true_logit(shifted, onehot))


def cw_loss(z, y) -> Tensor:
    z = _as_batch(z)
    if z.shape[1] < 2:
        raise ad.ShapeError("CW loss needs at least 2 classes")
    onehot = one_hot(y, z.shape[1], z.dtype)
    runner_up = ad.max_reduce(z, axis=1, exclude=onehot.astype(bool))
    return ad.sub(runner_up, _true_logit(z, onehot))


def _order_statistics(z: Tensor, count: int) -> list[Tensor]:
    """Largest ``count`` entries per row, in descending order."""
    taken = np.zeros(z.shape, dtype=bool)
    rows = np.arange(z.shape[0])
    out = []
    for _ in range(count):
        out.append(ad.max_reduce(z, axis=1, exclude=taken.copy()))
        masked = np.where(taken, -np.inf, z.data)
        taken[rows, np.argmax(masked, axis=1)] = True
    return out


def dlr_loss(z, y, norm_floor: float = 1e-12) -> Tensor:
    z = _as_batch(z)
    if z.shape[1] < 3:
        raise ad.ShapeError("DLR loss needs at least 3 classes")
    onehot = one_hot(y, z.shape[1], z.dtype)
    runner_up = ad.max_reduce(z, axis=1, exclude=onehot.astype(bool))
    top1, _, top3 = _order_statistics(z, 3)
    margin = ad.sub(runner_up, _true_logit(z, onehot))
    spread = ad.add(ad.sub(top1, top3), Tensor(np.asarray(norm_floor, dtype=z.dtype)))
    return ad.divide(margin, spread)


def zero_norm_rows(z) -> np.ndarray:
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    return np.max(np.abs(data), axis=-1) == 0


def scale_logits(z, scale_alpha: float = 10.0) -> Tensor:
    """``softmax(alpha * z / ||z||_inf)`` per row.

    Rows with ``||z||_inf == 0`` map to the uniform distribution; use
    :func:`zero_norm_rows` to detect them.
    """
    z = _as_batch(z)
    norm = ad.max_reduce(ad.abs_(z), axis=1, keepdims=True)
    fallback = norm.data == 0
    if np.any(fallback):
        norm = ad.add(norm, fallback.astype(z.dtype))
    return ad.stable_softmax(ad.scalar_mul(ad.divide(z, norm), scale_alpha), axis=1)


def scaled_cross_entropy(z, y, scale_alpha: float = 10.0) -> Tensor:
    """Cross-entropy of the rescaled logits ``alpha * z / ||z||_inf``."""
    z = _as_batch(z)
    norm = ad.max_reduce(ad.abs_(z), axis=1, keepdims=True)
    fallback = norm.data == 0
    if np.any(fallback):
        norm = ad.add(norm, fallback.astype(z.dtype))
    return cross_entropy(ad.scalar_mul(ad.divide(z, norm), scale_alpha), y)


def l2_loss(zhat: Tensor, onehot: np.ndarray) -> Tensor:
    return ad.lp_norm(ad.sub(zhat, onehot), 2, axis=1)


def draw_noise(shape: tuple[int, int], sigma: float, rng, dtype) -> np.ndarray:
    """Gaussian noise, one row per sample.

    ``rng`` is a single generator or a sequence with one generator per row;
    rows are always drawn so the streams advance independently of ``sigma``.
    """
    if isinstance(rng, np.random.Generator):
        draws = rng.standard_normal(shape)
    else:
        if len(rng) != shape[0]:
            raise ValueError(f"need {shape[0]} generators, got {len(rng)}")
        draws = np.stack([g.standard_normal(shape[1]) for g in rng])
    return (draws * sigma).astype(dtype)


def noise_loss(zhat: Tensor, onehot: np.ndarray, sigma: float, rng=None, noise: np.ndarray | None = None) -> Tensor:
    if noise is None:
        if rng is None:
            raise ValueError("noise_loss needs either rng or a pre-drawn noise array")
        noise = draw_noise(zhat.shape, sigma, rng, zhat.dtype)
    return ad.lp_norm(ad.sub(ad.add(zhat, noise), onehot), 2, axis=1)


def misclassified(z, y) -> np.ndarray:
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    return np.argmax(data, axis=1) != np.asarray(y)


def jitter_loss(zhat: Tensor, onehot: np.ndarray, sigma: float, gamma: Tensor, p: float,
                is_misclassified: np.ndarray, rng=None, noise: np.ndarray | None = None,
                norm_floor: float = 1e-12) -> Tensor:
    """Noisy distance to the one-hot label, divided by ``max(||gamma||_p, floor)``
    for rows already misclassified and by 1 elsewhere."""
    value = noise_loss(zhat, onehot, sigma, rng=rng, noise=noise)
    mask = np.asarray(is_misclassified, dtype=bool)
    if not mask.any():
        return value
    magnitude = ad.clamp_min(ad.lp_norm(gamma, p, axis=1), norm_floor)
    weight = mask.astype(zhat.dtype)
    denom = ad.add(ad.mul(magnitude, weight), 1 - weight)
    return ad.divide(value, denom)


def attack_loss(z: Tensor, y, config: LossConfig, gamma: Tensor | None = None, rng=None,
                noise: np.ndarray | None = None) -> Tensor:
    """Per-sample objective selected by ``config.kind``."""
    z = _as_batch(z)
    kind = config.kind
    if kind is LossKind.CE:
        return cross_entropy(z, y)
    if kind is LossKind.CW:
        return cw_loss(z, y)
    if kind is LossKind.DLR:
        return dlr_loss(z, y, config.norm_floor)
    if kind is LossKind.CE_SCALED:
        return scaled_cross_entropy(z, y, config.scale_alpha)
    onehot = one_hot(y, z.shape[1], z.dtype)
    zhat = scale_logits(z, config.scale_alpha)
    if kind is LossKind.L2_SCALED:
        return l2_loss(zhat, onehot)
    if noise is None and rng is None:
        # no generator: evaluate the noiseless objective
        noise = np.zeros(z.shape, dtype=z.dtype)
    if kind is LossKind.NOISE:
        return noise_loss(zhat, onehot, config.sigma, rng=rng, noise=noise)
    if gamma is None:
        raise ValueError("jitter loss needs the perturbation gamma in the graph")
    return jitter_loss(zhat, onehot, config.sigma, gamma, config.p, misclassified(z, y),
                       rng=rng, noise=noise, norm_floor=config.norm_floor)


def loss_values(z, y, config: LossConfig, gamma=None) -> np.ndarray:
    """Noiseless per-sample objective values, no graph needed by the caller."""
    z = _as_batch(np.asarray(z))
    if gamma is not None and not isinstance(gamma, Tensor):
        gamma = Tensor(np.asarray(gamma, dtype=z.dtype))
    return attack_loss(z, y, config.noiseless(), gamma=gamma).data



def stable_softmax_np(z) -> np.ndarray:
    """Row-wise softmax of a plain array, same arithmetic as the graph op."""
    z = np.asarray(z)
    return ad.stable_softmax(Tensor(z if z.dtype.kind == "f" else z.astype(np.float64)), axis=-1).data
