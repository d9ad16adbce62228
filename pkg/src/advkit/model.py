"""Feedforward ReLU classifiers with a binary weight format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"ADVF"
FORMAT_VERSION = 1


class WeightFileError(Exception):
    """Base class for weight file problems."""


class WeightFormatError(WeightFileError):
    """File does not start with the expected magic bytes."""


class WeightVersionError(WeightFileError):
    """File was written with an unsupported format version."""


class TruncatedWeightsError(WeightFileError):
    """File ends before all declared values were read."""


class WeightDimensionError(WeightFileError):
    """Declared layer dimensions are inconsistent."""


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    label: int
    confidence: float


class Classifier:
    """Affine/ReLU stack ``[d, h1, ..., C]`` with an output logit multiplier.

    ``weights[k]`` has shape ``(dims[k+1], dims[k])``. Instances are treated as
    immutable; training returns new classifiers.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 logit_scale: float = 1.0, dtype=np.float32):
        if len(weights) != len(biases) or not weights:
            raise WeightDimensionError("need one bias per weight matrix and at least one layer")
        if not logit_scale > 0:
            raise ValueError(f"logit_scale must be positive, got {logit_scale}")
        self.dtype = np.dtype(dtype)
        self.weights = tuple(np.array(w, dtype=self.dtype) for w in weights)
        self.biases = tuple(np.array(b, dtype=self.dtype) for b in biases)
        for w in self.weights + self.biases:
            w.setflags(write=False)
        dims = [self.weights[0].shape[1]]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != dims[-1]:
                raise WeightDimensionError(f"layer {k} weight shape {w.shape} does not follow width {dims[-1]}")
            if b.shape != (w.shape[0],):
                raise WeightDimensionError(f"layer {k} bias shape {b.shape} != ({w.shape[0]},)")
            dims.append(w.shape[0])
        self.dims = tuple(int(d) for d in dims)
        self.logit_scale = float(logit_scale)

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> "Classifier":
        """He-initialised weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, dtype=dtype)

    @classmethod
    def zeros(cls, dims: Sequence[int], dtype=np.float32) -> "Classifier":
        return cls([np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
                   [np.zeros(o) for o in dims[1:]], dtype=dtype)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    def with_logit_scale(self, scale: float) -> "Classifier":
        return Classifier(self.weights, self.biases, logit_scale=scale, dtype=self.dtype)

    def astype(self, dtype) -> "Classifier":
        return Classifier(self.weights, self.biases, logit_scale=self.logit_scale, dtype=dtype)

    def with_params(self, weights, biases) -> "Classifier":
        return Classifier(weights, biases, logit_scale=self.logit_scale, dtype=self.dtype)

    def param_tensors(self) -> tuple[list[Tensor], list[Tensor]]:
        return ([Tensor(w.copy(), requires_grad=True) for w in self.weights],
                [Tensor(b.copy(), requires_grad=True) for b in self.biases])

    def forward(self, batch, params: tuple[Sequence[Tensor], Sequence[Tensor]] | None = None) -> Tensor:
        """Logits for a ``B x d`` batch, differentiable w.r.t. the batch."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.dtype)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError(f"expected batch of shape (B, {self.input_dim}), got {x.shape}")
        if params is None:
            weights = [Tensor(w) for w in self.weights]
            biases = [Tensor(b) for b in self.biases]
        else:
            weights, biases = params
        h = x
        last = len(weights) - 1
        for k, (w, b) in enumerate(zip(weights, biases)):
            h = ad.add(ad.matmul(h, ad.transpose(w)), b)
            if k < last:
                h = ad.relu(h)
        if self.logit_scale != 1.0:
            h = ad.scalar_mul(h, self.logit_scale)
        return h

    __call__ = forward

    def logits(self, batch) -> np.ndarray:
        return self.forward(np.atleast_2d(np.asarray(batch, dtype=self.dtype))).data

    def predict(self, batch) -> list[Prediction]:
        z = self.forward(np.atleast_2d(np.asarray(batch, dtype=self.dtype)))
        probs = ad.stable_softmax(z).data
        labels = np.argmax(z.data, axis=1)  # first maximum wins ties
        return [Prediction(z.data[i].copy(), int(labels[i]), float(probs[i, labels[i]]))
                for i in range(z.shape[0])]

    def predict_labels(self, batch) -> np.ndarray:
        return np.argmax(self.logits(batch), axis=1)

    def input_gradient(self, x, target: int | Callable[[Tensor], Tensor]) -> np.ndarray:
        """Gradient w.r.t. ``x`` of logit ``target`` or of a scalar loss of the logits."""
        x = np.asarray(x, dtype=self.dtype)
        if isinstance(target, (int, np.integer)):
            if not 0 <= target < self.num_classes:
                raise IndexError(f"logit index {target} out of range for {self.num_classes} classes")
            k = int(target)

            def target_fn(z):
                onehot = np.zeros(z.shape, dtype=z.dtype)
                onehot[:, k] = 1
                return ad.sum_(ad.mul(z, onehot))
        else:
            target_fn = target
        leaf = Tensor(x.reshape(1, -1), requires_grad=True)
        out = target_fn(self.forward(leaf))
        ad.backward(out)
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        return g.reshape(x.shape)

    def class_gradients(self, x) -> np.ndarray:
        """``C x d`` matrix of logit input-gradients at a single input."""
        return np.stack([self.input_gradient(x, k) for k in range(self.num_classes)])


def save_weights(model: Classifier, path) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.weights))]
    parts.append(struct.pack(f"<{len(model.dims)}I", *model.dims))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path, logit_scale: float = 1.0, dtype=np.float32) -> Classifier:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedWeightsError(f"{path}: header truncated")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise WeightVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if n_layers < 1:
        raise WeightDimensionError(f"{path}: layer count {n_layers}")
    offset = 12
    dims_size = 4 * (n_layers + 1)
    if len(raw) < offset + dims_size:
        raise TruncatedWeightsError(f"{path}: layer dims truncated")
    dims = struct.unpack_from(f"<{n_layers + 1}I", raw, offset)
    offset += dims_size
    if any(d == 0 for d in dims):
        raise WeightDimensionError(f"{path}: zero-width layer in dims {list(dims)}")
    expected = offset + 4 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) < expected:
        raise TruncatedWeightsError(f"{path}: {len(raw)} bytes, dims {list(dims)} need {expected}")
    if len(raw) > expected:
        raise WeightDimensionError(f"{path}: {len(raw) - expected} trailing bytes beyond dims {list(dims)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f4", count=fan_out * fan_in, offset=offset)
        offset += 4 * fan_out * fan_in
        b = np.frombuffer(raw, dtype="<f4", count=fan_out, offset=offset)
        offset += 4 * fan_out
        weights.append(w.reshape(fan_out, fan_in))
        biases.append(b)
    return Classifier(weights, biases, logit_scale=logit_scale, dtype=dtype)
