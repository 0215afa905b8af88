"""Small argument checkers shared by the estimators and the CLI."""

import math
import numbers

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


def check_open_unit(value, name):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValidationError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise ValidationError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_positive(value, name):
    value = float(value)
    if not (value > 0.0 and math.isfinite(value)):
        raise ValidationError(f"{name} must be a finite positive number, got {value}")
    return value


def check_lambdas(lambdas, k):
    """Return a float (shared threshold) or a tuple of length ``k``."""
    if np.ndim(lambdas) == 0:
        lam = float(lambdas)
        if not lam >= 0.0:
            raise ValidationError(f"threshold must be >= 0, got {lam}")
        return lam
    lams = tuple(float(x) for x in lambdas)
    if len(lams) != k:
        raise ValidationError(f"threshold vector has length {len(lams)}, expected K={k}")
    if any(not x >= 0.0 for x in lams):
        raise ValidationError("thresholds must be >= 0")
    return lams


def check_theta(theta, k):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (k,):
        raise ValidationError(f"theta must have length K={k}, got shape {theta.shape}")
    if np.any(theta <= 0) or np.any(np.diff(theta) > 0):
        raise ValidationError("theta must be positive and non-increasing")
    return theta


def check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValidationError("threshold grid must be a non-empty 1-d sequence")
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ValidationError("threshold grid values must be finite and >= 0")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("threshold grid must be strictly ascending")
    return grid
