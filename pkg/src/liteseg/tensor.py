"""Dense NCHW tensors.

Tensors are plain 4-D numpy arrays (float32 by default).  The helpers here
validate shapes and implement the few structural primitives the operators
build on.  Nothing mutates its arguments.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def __str__(self) -> str:
        return f"({self.n},{self.c},{self.h},{self.w})"


def shape4(*dims) -> Shape4:
    if len(dims) == 1 and not isinstance(dims[0], (int, np.integer)):
        dims = tuple(dims[0])
    if len(dims) != 4:
        raise ShapeError(f"expected 4 extents, got {dims}")
    s = Shape4(*(int(d) for d in dims))
    if min(s) < 1:
        raise ShapeError(f"invalid shape {s}: every extent must be >= 1")
    return s


def check_tensor(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D NCHW array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {x.shape}")
    return x


def check_finite(x: np.ndarray, where: str = "") -> np.ndarray:
    # NaN/Inf always poison the sum; only an overflowing sum needs the elementwise scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = x.sum()
    if not np.isfinite(total) and not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced{' by ' + where if where else ''}")
    return x


def zeros(shape, dtype=DTYPE) -> np.ndarray:
    return np.zeros(shape4(shape), dtype=dtype)


def from_array(data, shape=None, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if shape is not None:
        arr = arr.reshape(shape4(shape))
    return check_tensor(arr)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(
            f"cannot concatenate channels of {Shape4(*a.shape)} and {Shape4(*b.shape)}: "
            "batch and spatial extents differ"
        )
    return np.concatenate([a, b], axis=1)


def slice_channels(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    check_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")
    return x[:, start:stop].copy()


def pad2d(x: np.ndarray, top: int, bottom: int, left: int, right: int, value: float = 0.0) -> np.ndarray:
    check_tensor(x)
    if min(top, bottom, left, right) < 0:
        raise ShapeError("padding amounts must be non-negative")
    return np.pad(
        x, ((0, 0), (0, 0), (top, bottom), (left, right)), mode="constant", constant_values=value
    )


def next_multiple(n: int, m: int = 32) -> int:
    return -(-n // m) * m


def reflect_pad_to_multiple(x: np.ndarray, m: int = 32) -> np.ndarray:
    """Reflect-pads the bottom/right edges so both spatial extents divide ``m``."""
    check_tensor(x)
    h, w = x.shape[2:]
    ph, pw = next_multiple(h, m) - h, next_multiple(w, m) - w
    if ph >= h or pw >= w:
        raise ShapeError(f"cannot reflect-pad {h}x{w} to a multiple of {m}")
    if not (ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
