"""Input validation helpers used across the estimators and free functions."""

import math
import numbers

import numpy as np

from .exceptions import PreconditionError


def check_finite(arr, name="input"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} contains non-finite values")
    return arr


def check_unit_interval(arr, name="input"):
    arr = check_finite(arr, name)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise PreconditionError(f"{name} has values outside [0, 1]")
    return arr


def check_ndim(arr, ndim, name="input"):
    arr = np.asarray(arr)
    if arr.ndim != ndim:
        raise PreconditionError(
            f"{name} must be {ndim}-dimensional, got shape {arr.shape}"
        )
    return arr


def check_budget(k, n, name="budget"):
    """Validate a selection budget ``1 <= k <= n`` and return it as int."""
    if isinstance(k, bool) or not isinstance(k, numbers.Integral):
        raise PreconditionError(f"{name} must be an integer, got {k!r}")
    k = int(k)
    if k < 1:
        raise PreconditionError(f"{name} must be >= 1, got {k}")
    if k > n:
        raise PreconditionError(f"{name} {k} exceeds pool size {n}")
    return k


def check_fraction(fraction):
    fraction = float(fraction)
    if not (0.0 < fraction <= 1.0) or math.isnan(fraction):
        raise PreconditionError(f"fraction must be in (0, 1], got {fraction}")
    return fraction


def check_embeddings(X, name="embeddings"):
    """Return ``X`` as a finite float64 (n, c) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    check_ndim(X, 2, name)
    return check_finite(X, name)
