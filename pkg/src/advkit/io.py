"""Dataset readers and deterministic result writers."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackOutcome
from .training import Dataset

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_CLASSES = 10

RESULT_HEADER = ("index", "true_label", "clean_pred", "adv_pred", "success", "l2_norm", "linf_norm",
                 "first_success_iter", "loss", "model", "seed")


class CifarFormatError(ValueError):
    pass


def read_cifar10_binary(path, limit: int | None = None) -> Dataset:
    """Parse a CIFAR-10 binary batch.

    Each record is one label byte followed by 3072 pixel bytes: the red,
    green and blue 32x32 planes, each row-major.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise CifarFormatError(f"{path}: truncated record at byte offset {offset} "
                               f"({len(raw) - offset} of {CIFAR_RECORD} bytes)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(f"{path}: label {labels[i]} > 9 in record {i} (byte offset {i * CIFAR_RECORD})")
    inputs = records[:, 1:].astype(np.float32) / np.float32(255)
    return Dataset(inputs, labels, CIFAR_CLASSES, "test", {"source": "cifar10", "file": str(path)})


def write_cifar10_binary(inputs, labels, path) -> None:
    """Inverse of :func:`read_cifar10_binary` for inputs on the 1/255 grid."""
    pixels = np.rint(np.asarray(inputs, dtype=np.float64) * 255).astype(np.uint8)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def fmt_float(value) -> str:
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.9g}"


@dataclass(frozen=True)
class ResultRow:
    index: int
    true_label: int
    clean_pred: int
    adv_pred: int
    success: bool
    l2_norm: float
    linf_norm: float
    first_success_iter: int | None
    loss: str
    model: str
    seed: int

    @classmethod
    def from_outcome(cls, index: int, outcome: AttackOutcome, loss: str, model: str, seed: int) -> "ResultRow":
        return cls(int(index), outcome.label, outcome.clean_pred, outcome.adv_pred, outcome.success,
                   outcome.l2_norm, outcome.linf_norm, outcome.first_success_iter, loss, model, int(seed))

    @property
    def label(self) -> int:
        return self.true_label

    def cells(self) -> list[str]:
        return [str(self.index), str(self.true_label), str(self.clean_pred), str(self.adv_pred),
                str(int(self.success)), fmt_float(self.l2_norm), fmt_float(self.linf_norm),
                "" if self.first_success_iter is None else str(self.first_success_iter),
                self.loss, self.model, str(self.seed)]


def _open_for_write(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_csv(header: Sequence[str], rows: Iterable[Sequence], path) -> None:
    with _open_for_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_results(rows: Iterable[ResultRow], path) -> None:
    write_csv(RESULT_HEADER, (r.cells() for r in rows), path)


def read_results(path) -> list[ResultRow]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != RESULT_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for cells in reader:
            i, t, c, a, s, l2, li, first, loss, model, seed = cells
            out.append(ResultRow(int(i), int(t), int(c), int(a), s == "1", float(l2), float(li),
                                 None if first == "" else int(first), loss, model, int(seed)))
    return out


def to_jsonable(value):
    """Plain JSON data with floats rounded to 9 significant digits and NaN as null."""
    if hasattr(value, "to_dict"):
        return to_jsonable(value.to_dict())
    if isinstance(value, dict):
        return {str(k.value if isinstance(k, enum.Enum) else k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return None
        return float(f"{v:.9g}")
    return value


def dumps_report(report) -> str:
    return json.dumps(to_jsonable(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report, path) -> None:
    text = dumps_report(report)
    with _open_for_write(path) as fh:
        fh.write(text)


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
