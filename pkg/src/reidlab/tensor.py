"""Dense tensor substrate: immutable float64 arrays plus the handful of
pure operations everything else is built on.

Layout is row-major everywhere so reshapes are metadata-only. There is no
broadcasting: every shape mismatch is a hard error, because silently
broadcast affinity matrices (C x C vs N x N) are exactly the bug class we
want loud.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor", "Shape2", "Shape3", "tensor",
    "matmul", "softmax_rows", "flatten_spatial", "unflatten_spatial",
    "global_avg_pool", "add", "mul", "scale", "relu", "transpose",
    "concat_channels", "frobenius_norm",
    "softmax_rows_raw",
    "to_bytes", "from_bytes", "save_tensor", "load_tensor",
]


@dataclass(frozen=True)
class Shape2:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"Shape2 components must be >= 1, got {self}")


@dataclass(frozen=True)
class Shape3:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ShapeError(f"Shape3 components must be >= 1, got {self}")


class Tensor:
    """Immutable dense array of float64 values in row-major order."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "_data", arr)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def tolist(self):
        return self._data.tolist()

    def __eq__(self, other):
        return (
            isinstance(other, Tensor)
            and self.shape == other.shape
            and np.array_equal(self._data, other._data)
        )

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _require_rank(t: Tensor, rank: int, op: str) -> None:
    if t.rank != rank:
        raise ShapeError(f"{op} expects rank-{rank} input, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    _require_rank(a, 2, "matmul")
    _require_rank(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return Tensor(a.data @ b.data)


def softmax_rows_raw(m: np.ndarray) -> np.ndarray:
    """Row softmax on a raw array, stabilized by per-row max subtraction."""
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over each row; rows sum to 1 and the result is shift-invariant."""
    _require_rank(m, 2, "softmax_rows")
    return Tensor(softmax_rows_raw(m.data))


def flatten_spatial(a: Tensor) -> Tensor:
    """Reshape C x H x W into C x N (N = H*W), channel rows in spatial row-major order."""
    _require_rank(a, 3, "flatten_spatial")
    c, h, w = a.shape
    return Tensor(a.data.reshape(c, h * w))


def unflatten_spatial(m: Tensor, shape: Shape3 | tuple[int, int, int]) -> Tensor:
    """Inverse of flatten_spatial."""
    _require_rank(m, 2, "unflatten_spatial")
    if isinstance(shape, Shape3):
        c, h, w = shape.channels, shape.height, shape.width
    else:
        c, h, w = shape
    if m.shape != (c, h * w):
        raise ShapeError(f"cannot unflatten {m.shape} into ({c},{h},{w})")
    return Tensor(m.data.reshape(c, h, w))


def global_avg_pool(a: Tensor) -> Tensor:
    """Spatial mean per channel: C x H x W -> length-C vector."""
    _require_rank(a, 3, "global_avg_pool")
    return Tensor(a.data.mean(axis=(1, 2)))


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return Tensor(a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (no broadcasting)."""
    _require_same_shape(a, b, "mul")
    return Tensor(a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * float(c))


def relu(a: Tensor) -> Tensor:
    return Tensor(np.maximum(a.data, 0.0))


def transpose(m: Tensor) -> Tensor:
    _require_rank(m, 2, "transpose")
    return Tensor(m.data.T)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack rank-3 tensors along the channel axis; spatial dims must agree."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in tensors:
        _require_rank(t, 3, "concat_channels")
    hw = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != hw:
            raise ShapeError(f"spatial dims differ: {t.shape[1:]} vs {hw}")
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))


def frobenius_norm(a: Tensor) -> float:
    return float(np.sqrt((a.data * a.data).sum()))


# Flat binary format: u32 rank, u32 per dim, then float64 payload, all
# little-endian. Used for embedding dumps and checkpoint blobs.

def to_bytes(t: Tensor) -> bytes:
    header = struct.pack("<I", t.rank) + struct.pack(f"<{t.rank}I", *t.shape)
    return header + t.data.astype("<f8").tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at offset; returns (tensor, next_offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims))
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return Tensor(arr.reshape(dims)), offset


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t, _ = from_bytes(fh.read())
    return t
