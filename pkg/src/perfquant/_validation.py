"""Input validation helpers used by the estimators and the functional API."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import GridError, ValidationError

UNIFORM_RTOL = 1e-6


def as_float_vector(x, name="array"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_times(times, name="times"):
    """Return ``times`` as a float vector, requiring strict monotonic increase."""
    t = as_float_vector(times, name)
    if t.size >= 2 and np.any(np.diff(t) <= 0):
        raise GridError(f"{name} must be strictly increasing")
    return t


def uniform_step(times):
    """Sampling interval of a uniform grid, or raise :class:`GridError`."""
    t = np.asarray(times, dtype=float)
    if t.size < 2:
        raise GridError("a uniform grid needs at least two samples")
    d = np.diff(t)
    dt = (t[-1] - t[0]) / (t.size - 1)
    if np.max(np.abs(d - dt)) > UNIFORM_RTOL * dt:
        raise GridError("sampling grid is not uniform")
    return float(dt)


def grid_indices(grid, times):
    """Indices of ``times`` inside ``grid``; every requested time must be on the grid."""
    grid = np.asarray(grid, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    dt = uniform_step(grid)
    pos = (times - grid[0]) / dt
    idx = np.rint(pos).astype(int)
    if np.any(idx < 0) or np.any(idx >= grid.size):
        raise GridError("requested times are not covered by the input grid")
    if np.any(np.abs(pos - idx) > 1e-6):
        raise GridError("requested times are not on the input grid")
    return idx


def check_curves(X, n_times=None, name="X"):
    """Validate a (n_curves, n_times) matrix of sampled curves."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, input_name=name)
    if n_times is not None and X.shape[1] != n_times:
        raise GridError(f"{name} has {X.shape[1]} time points, expected {n_times}")
    return X


def check_stack(X, name="series"):
    """Validate an image stack of shape (nt, ny, nx)."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False, input_name=name)
    if X.ndim != 3:
        raise ValidationError(f"{name} must have shape (nt, ny, nx), got {X.shape}")
    if X.shape[0] < 2:
        raise ValidationError(f"{name} needs at least two frames")
    return X


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return float(value)
