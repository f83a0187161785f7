"""Flat-vector numerics shared by the model, attack and aggregation code.

Every weight-space quantity (GM snapshots, client deltas, projections,
perturbations) is a float64 vector. ``FlatWeights`` pairs that vector with
the layer layout needed to rebuild the named arrays.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyVector, LengthMismatch, ZeroNormVector

Layout = list[tuple[str, tuple[int, ...]]]


def layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout))


@dataclass(frozen=True)
class FlatWeights:
    """Ordered float64 parameter vector plus its (name, shape) layout."""

    values: np.ndarray
    layout: Layout = field(default_factory=list)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if not self.layout:
            object.__setattr__(self, "layout", [("flat", (values.size,))])
        elif layout_size(self.layout) != values.size:
            raise LengthMismatch(
                f"layout describes {layout_size(self.layout)} values, got {values.size}"
            )

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def with_values(self, values) -> "FlatWeights":
        return FlatWeights(np.asarray(values, dtype=np.float64), self.layout)

    def unflatten(self) -> dict[str, np.ndarray]:
        return unflatten(self)


def flatten(arrays: dict[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]) -> FlatWeights:
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    layout = [(name, tuple(int(s) for s in np.shape(a))) for name, a in items]
    if not items:
        return FlatWeights(np.zeros(0), [("flat", (0,))])
    values = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for _, a in items])
    return FlatWeights(values, layout)


def unflatten(w: FlatWeights) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, shape in w.layout:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = w.values[offset:offset + n].reshape(shape)
        offset += n
    return out


def as_vector(x) -> np.ndarray:
    if isinstance(x, FlatWeights):
        return x.values
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise LengthMismatch(f"length {a.size} != {b.size}")
    return a, b


def _wrap(result: np.ndarray, like) -> np.ndarray | FlatWeights:
    if isinstance(like, FlatWeights):
        return FlatWeights(result, like.layout)
    return result


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors.

    Raises ZeroNormVector when either input has zero norm; callers pick the
    policy for that case.
    """
    a, b = _pair(a, b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormVector("cosine similarity undefined for a zero vector")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def frobenius_diff(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(a - b))


def mean_abs(d) -> float:
    d = as_vector(d)
    if d.size == 0:
        raise EmptyVector("mean_abs of an empty vector")
    return float(np.mean(np.abs(d)))


def axpy(alpha: float, x, y):
    x_, y_ = _pair(x, y)
    return _wrap(alpha * x_ + y_, y if isinstance(y, FlatWeights) else x)


def add(a, b):
    a_, b_ = _pair(a, b)
    return _wrap(a_ + b_, a)


def sub(a, b):
    a_, b_ = _pair(a, b)
    return _wrap(a_ - b_, a)


def scale(alpha: float, x):
    return _wrap(alpha * as_vector(x), x)


def mean_of(vectors: Iterable) -> np.ndarray:
    """Mean of equal-length vectors, summed in list order."""
    vs = [as_vector(v) for v in vectors]
    if not vs:
        raise EmptyVector("mean of no vectors")
    acc = np.zeros_like(vs[0])
    for v in vs:
        if v.shape != acc.shape:
            raise LengthMismatch(f"length {v.size} != {acc.size}")
        acc = acc + v
    return acc / len(vs)


# --- seeded randomness -----------------------------------------------------

def stream_id(part) -> int:
    """Map a stream component (int or str) to a non-negative integer."""
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream ids must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed`` and a stream path.

    Identical (seed, stream) pairs give identical draws regardless of how many
    other streams were created or on which thread.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(stream_id(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))
