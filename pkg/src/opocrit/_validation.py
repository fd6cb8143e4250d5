"""Small argument checks shared across modules."""

from __future__ import annotations

import math

import numpy as np


def check_positive(name, value):
    if not (isinstance(value, (int, float, np.floating, np.integer)) and math.isfinite(value)):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return float(value)


def check_nonnegative(name, value):
    if not (isinstance(value, (int, float, np.floating, np.integer)) and math.isfinite(value)):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_finite(name, value):
    if not (isinstance(value, (int, float, np.floating, np.integer)) and math.isfinite(value)):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    return float(value)


def check_field(values, grid, *, name="field", leading=None):
    """Return ``values`` as an array whose trailing axes match ``grid``.

    ``leading`` optionally fixes the number of leading (batch/component) axes.
    """
    arr = np.asarray(values)
    if arr.ndim < 2 or arr.shape[-2:] != (grid.nx, grid.ny):
        raise ValueError(
            f"{name} trailing shape {arr.shape[-2:]} does not match grid ({grid.nx}, {grid.ny})"
        )
    if leading is not None and arr.ndim != 2 + leading:
        raise ValueError(f"{name} must have {leading} leading axes, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr
