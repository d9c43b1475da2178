"""Input validation helpers shared across the public API.

These follow the scikit-learn convention: coerce to a well-typed numpy
array, raise ValueError with a message that names the offending input.
"""

from __future__ import annotations

import numpy as np

from .network import N_ACTIONS, OBS_SIZE


def check_observation(obs, name: str = "obs") -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if obs.shape != (OBS_SIZE,):
        raise ValueError(f"{name} must have {OBS_SIZE} values, got {obs.shape[0]}")
    if not np.isfinite(obs).all():
        raise ValueError(f"{name} contains non-finite values")
    return obs


def check_action(action, name: str = "action") -> int:
    a = int(action)
    if a != action or not 0 <= a < N_ACTIONS:
        raise ValueError(f"{name} must be an integer in [0, {N_ACTIONS - 1}], got {action!r}")
    return a


def check_box(box, name: str = "box") -> np.ndarray:
    """A 16 x 2 array of [lo, hi] intervals, each within [0, 1]."""
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (OBS_SIZE, 2):
        raise ValueError(f"{name} must be {OBS_SIZE} [lo, hi] pairs, got shape {box.shape}")
    if not np.isfinite(box).all():
        raise ValueError(f"{name} contains non-finite bounds")
    bad = np.nonzero(box[:, 0] > box[:, 1])[0]
    if bad.size:
        raise ValueError(f"{name}[{bad[0]}] is empty: lo {box[bad[0], 0]} > hi {box[bad[0], 1]}")
    if box.min() < 0.0 or box.max() > 1.0:
        raise ValueError(f"{name} intervals must lie within [0, 1]")
    return box


def check_waypoints(waypoints, name: str = "waypoints") -> np.ndarray:
    pts = np.asarray(waypoints, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must be an (n, 3) array of points, got shape {pts.shape}")
    if pts.shape[0] < 4:
        raise ValueError(f"{name} needs at least 4 points, got {pts.shape[0]}")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if (steps == 0.0).any():
        k = int(np.nonzero(steps == 0.0)[0][0])
        raise ValueError(f"{name}[{k}] and {name}[{k + 1}] coincide")
    return pts


def check_positive(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v <= 0.0:
        raise ValueError(f"{name} must be strictly positive, got {value!r}")
    return v
