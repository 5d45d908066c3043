"""Tensor conventions and small shape/finiteness helpers.

A tensor in this package is a C-contiguous (row-major) ``numpy.ndarray`` of
64-bit floats.  All layer math runs in float64 so that finite-difference
oracles can be checked at tight tolerances.
"""

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce ``data`` to a row-major float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"cannot view {arr.size} elements as shape {tuple(shape)}")
        arr = arr.reshape(shape)
    return arr


def require_shape(arr: np.ndarray, shape, what: str) -> None:
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {tuple(arr.shape)}")


def require_ndim(arr: np.ndarray, ndim: int, what: str) -> None:
    if arr.ndim != ndim:
        raise ShapeError(f"{what}: expected {ndim}-d input, got {arr.ndim}-d")


def require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what}: non-finite values present")
