"""Input validation helpers shared by every public operation.

All numeric carriers are plain float64 numpy arrays in row-major (C) order.
The helpers here coerce, copy, and check inputs at API boundaries so the
numerical code can assume well-formed operands.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "NonFiniteError",
    "MaskError",
    "as_matrix",
    "as_vector",
    "check_chain",
    "check_same_shape",
    "check_binary_mask",
    "check_index",
    "frozen",
]


class ShapeError(ValueError):
    """Operands have incompatible or malformed dimensions."""


class MaskError(ValueError):
    """A mask is missing, mis-shaped, or contains values outside {0, 1}."""


class NumericError(ArithmeticError):
    """A numeric failure (as opposed to invalid user input)."""


class NonFiniteError(NumericError):
    """A value that must be finite is NaN or infinite."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a freshly-copied 2-D float64 C-order array.

    Raises ShapeError for wrong dimensionality or empty axes and
    NonFiniteError if any entry is NaN/Inf.
    """
    a = np.array(x, dtype=np.float64, order="C")
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have rows >= 1 and cols >= 1, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def as_vector(x, name: str = "vector", nonneg: bool = False) -> np.ndarray:
    """Coerce ``x`` to a 1-D float64 array, optionally requiring entries >= 0."""
    a = np.array(x, dtype=np.float64).reshape(-1)
    if a.size < 1:
        raise ShapeError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    if nonneg and np.any(a < 0):
        raise ValueError(f"{name} must be entrywise >= 0")
    return a


def check_chain(left: np.ndarray, right: np.ndarray, lname: str, rname: str) -> None:
    """Require left @ right to be well-formed, naming the offending dims."""
    if left.shape[1] != right.shape[0]:
        raise ShapeError(
            f"{lname} has {left.shape[1]} cols but {rname} has {right.shape[0]} rows"
        )


def check_same_shape(a: np.ndarray, b: np.ndarray, aname: str, bname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{aname} shape {a.shape} != {bname} shape {b.shape}")


def check_binary_mask(mask: np.ndarray, name: str = "mask") -> None:
    """Require every entry of ``mask`` to be exactly 0.0 or 1.0."""
    bad = (mask != 0.0) & (mask != 1.0)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise MaskError(f"{name} entry ({i}, {j}) = {mask[i, j]!r} is not in {{0, 1}}")


def check_index(i: int, bound: int, name: str) -> None:
    if not 0 <= i < bound:
        raise IndexError(f"{name}={i} out of range [0, {bound})")


def frozen(a: np.ndarray) -> np.ndarray:
    """Return ``a`` marked read-only (value types stay immutable after init)."""
    a.flags.writeable = False
    return a
