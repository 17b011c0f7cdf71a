"""Layered model parameters and the algebra every aggregator builds on.

A parameter set is an ordered list of named float32 layers, each either a
2-D weight matrix or a 1-D bias vector. Nodes exchange whole parameter
sets; aggregators compare, rescale, and average them. Reductions (dot
products, norms, means) run in float64 and results are stored back as
float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"LPRM"
FORMAT_VERSION = 1

_KIND_MATRIX = 0
_KIND_VECTOR = 1


class ShapeError(ValueError):
    """Two parameter sets are not layer-by-layer compatible."""


class DegenerateAggregation(ValueError):
    """Aggregation weights sum to zero, so no average exists."""


class NumericalError(ArithmeticError):
    """A computation produced or received non-finite values."""


@dataclass(frozen=True)
class LayeredParams:
    """Ordered, named float32 layers of one model.

    Layer order and shapes are fixed by the architecture; arrays are
    treated as immutable once wrapped here.
    """

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.names) != len(self.arrays):
            raise ShapeError("names and arrays must have equal length")
        for name, arr in zip(self.names, self.arrays):
            if arr.ndim not in (1, 2):
                raise ShapeError(f"layer {name!r} must be 1-D or 2-D, got {arr.ndim}-D")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, np.ndarray]]) -> "LayeredParams":
        """Build from (name, array) pairs, casting values to float32."""
        names, arrays = [], []
        for name, arr in pairs:
            names.append(str(name))
            arrays.append(np.ascontiguousarray(arr, dtype=np.float32))
        return cls(tuple(names), tuple(arrays))

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.names, self.arrays))

    def __len__(self) -> int:
        return len(self.names)

    @property
    def num_values(self) -> int:
        """Total scalar parameter count across all layers."""
        return int(sum(a.size for a in self.arrays))

    def schema(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, a.shape) for n, a in self)

    def copy(self) -> "LayeredParams":
        return LayeredParams(self.names, tuple(a.copy() for a in self.arrays))

    def allclose(self, other: "LayeredParams", rtol: float = 1e-6, atol: float = 1e-7) -> bool:
        if not shape_compatible(self, other):
            return False
        return all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.arrays, other.arrays))

    def equal(self, other: "LayeredParams") -> bool:
        """Bit-exact equality."""
        if not shape_compatible(self, other):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))


def shape_compatible(p: LayeredParams, m: LayeredParams) -> bool:
    return p.schema() == m.schema()


def require_compatible(p: LayeredParams, m: LayeredParams) -> None:
    if not shape_compatible(p, m):
        raise ShapeError(f"incompatible parameter sets: {p.schema()} vs {m.schema()}")


def is_finite(p: LayeredParams) -> bool:
    return all(np.isfinite(a).all() for a in p.arrays)


def require_finite(*params: LayeredParams) -> None:
    """Reject parameter sets containing NaN or infinity."""
    for p in params:
        if not is_finite(p):
            raise NumericalError("parameter set contains non-finite values")


def cosine_similarity(p: LayeredParams, m: LayeredParams) -> float:
    """Layer-wise average of row-wise average cosine similarities.

    For each matrix layer the cosine of every corresponding row pair is
    averaged; a bias vector counts as a single row. The per-layer values
    are then averaged and the result clamped to [-1, 1] against rounding.
    A zero-norm row on either side contributes 0 to its row average.
    """
    require_compatible(p, m)
    per_layer = np.empty(len(p), dtype=np.float64)
    for i, (a, b) in enumerate(zip(p.arrays, m.arrays)):
        rows_a = np.atleast_2d(a).astype(np.float64)
        rows_b = np.atleast_2d(b).astype(np.float64)
        dots = np.einsum("ij,ij->i", rows_a, rows_b)
        denom = np.linalg.norm(rows_a, axis=1) * np.linalg.norm(rows_b, axis=1)
        safe = denom > 0.0
        cosines = np.where(safe, dots / np.where(safe, denom, 1.0), 0.0)
        per_layer[i] = cosines.mean()
    return float(np.clip(per_layer.mean(), -1.0, 1.0))


def layer_norms(p: LayeredParams) -> list[float]:
    """Frobenius norm of each layer, in layer order."""
    return [float(np.linalg.norm(a.astype(np.float64))) for a in p.arrays]


def weighted_average(params: Sequence[LayeredParams], weights: Sequence[float]) -> LayeredParams:
    """Convex combination of shape-compatible parameter sets.

    Weights must be nonnegative and are normalized to sum to one.
    Raises DegenerateAggregation when they sum to zero.
    """
    if len(params) == 0:
        raise ValueError("no parameter sets to average")
    if len(params) != len(weights):
        raise ValueError("params and weights must have equal length")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise DegenerateAggregation("aggregation weights sum to zero")
    first = params[0]
    for other in params[1:]:
        require_compatible(first, other)
    out = []
    for li, name in enumerate(first.names):
        acc = np.zeros(first.arrays[li].shape, dtype=np.float64)
        for p, wj in zip(params, w):
            if wj != 0.0:
                acc += wj * p.arrays[li].astype(np.float64)
        out.append((name, (acc / total).astype(np.float32)))
    return LayeredParams.from_pairs(out)


def flatten(p: LayeredParams) -> np.ndarray:
    """Concatenate all layers into one float32 vector, row-major per layer."""
    return np.concatenate([a.ravel() for a in p.arrays]) if p.arrays else np.empty(0, np.float32)


def unflatten(vec: np.ndarray, like: LayeredParams) -> LayeredParams:
    """Inverse of flatten given a reference shape schema."""
    vec = np.asarray(vec)
    if vec.size != like.num_values:
        raise ShapeError(f"vector length {vec.size} does not match schema size {like.num_values}")
    out, offset = [], 0
    for name, arr in like:
        chunk = vec[offset:offset + arr.size]
        out.append((name, chunk.reshape(arr.shape)))
        offset += arr.size
    return LayeredParams.from_pairs(out)


def to_bytes(p: LayeredParams) -> bytes:
    """Serialize to the self-describing little-endian binary blob."""
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(p))]
    for name, arr in p:
        encoded = name.encode("utf-8")
        kind = _KIND_VECTOR if arr.ndim == 1 else _KIND_MATRIX
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", kind))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> LayeredParams:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ValueError("bad magic, not a serialized parameter set")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    offset = 10
    pairs = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (kind,) = struct.unpack_from("<B", view, offset)
            offset += 1
            ndim = 1 if kind == _KIND_VECTOR else 2
            dims = struct.unpack_from(f"<{ndim}I", view, offset)
            offset += 4 * ndim
            size = int(np.prod(dims))
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset += 4 * size
            pairs.append((name, arr.copy()))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"truncated or corrupt parameter blob: {exc}") from exc
    return LayeredParams.from_pairs(pairs)


def save(p: LayeredParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(p))


def load(path) -> LayeredParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
