"""Input validation helpers.

Arrays are validated once at public API boundaries (sklearn-style) and
trusted internally.  All tensors are stored as float32; helpers cast
compatible inputs and reject wrong ranks or non-finite data where a
contract requires it.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


def as_f32(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Return ``x`` as a float32 ndarray, optionally enforcing its rank."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(
        arr.dtype, np.integer
    ):
        raise ValueError(f"{name} must be numeric, got dtype {arr.dtype}")
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr.astype(DTYPE, copy=False)


def as_matrix(x, name: str) -> np.ndarray:
    return as_f32(x, name, ndim=2)


def as_vector(x, name: str) -> np.ndarray:
    return as_f32(x, name, ndim=1)


def as_hidden_batch(x, name: str, model_dim: int | None = None) -> np.ndarray:
    """Validate a decode-step hidden state of shape (batch, 1, model_dim)."""
    arr = as_f32(x, name, ndim=3)
    if arr.shape[1] != 1:
        raise ValueError(
            f"{name} must have a singleton token axis (batch, 1, d), got {arr.shape}"
        )
    if model_dim is not None and arr.shape[2] != model_dim:
        raise ValueError(f"{name} has model_dim {arr.shape[2]}, expected {model_dim}")
    return arr


def as_head_query(x, name: str) -> np.ndarray:
    """Validate a per-head decode query of shape (batch, heads, 1, head_dim)."""
    arr = as_f32(x, name, ndim=4)
    if arr.shape[2] != 1:
        raise ValueError(
            f"{name} must have a singleton query axis (B, H, 1, d_h), got {arr.shape}"
        )
    return arr


def as_index_array(x, name: str, upper: int | None = None) -> np.ndarray:
    """Return a 1-D int64 index array, checking bounds against ``upper``."""
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must hold integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and arr.min() < 0:
        raise IndexError(f"{name} contains negative indices")
    if upper is not None and arr.size and arr.max() >= upper:
        raise IndexError(f"{name} contains indices >= {upper}")
    return arr


def check_count(value: int, name: str, minimum: int = 1,
                upper: int | None = None) -> int:
    value = int(value)
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    if upper is not None and value > upper:
        raise ValueError(f"{name} must be <= {upper}, got {value}")
    return value


def check_fraction(value: float, name: str, closed_right: bool = True) -> float:
    value = float(value)
    if closed_right:
        if not 0.0 < value <= 1.0:
            raise ValueError(f"{name} must be in (0, 1], got {value}")
    else:
        # right-open: zero is a legal "feature off" value, one is not
        if not 0.0 <= value < 1.0:
            raise ValueError(f"{name} must be in [0, 1), got {value}")
    return value


def check_choice(value: str, options: tuple[str, ...], name: str) -> str:
    if value not in options:
        raise ValueError(f"{name} must be one of {options}, got {value!r}")
    return value


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr
