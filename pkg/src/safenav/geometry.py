"""Parametric tube geometry: spline centerline, arc-length table, queries.

A tube is a cubic-spline centerline through waypoints plus a constant
radius.  After construction the model is immutable and may be shared
read-only across workers.  All lengths are millimetres.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np
from scipy.interpolate import CubicSpline

from . import _kernels
from .ioutil import atomic_write_text
from .validation import check_positive, check_waypoints

DEFAULT_RADIUS = 20.0

BUILTIN_TUBE_IDS = ("tube0", "tube1", "tube2", "tube3")


class GeometryError(ValueError):
    """Raised for degenerate tube geometry (e.g. bends tighter than the radius)."""


class TubeModel:
    """Centerline curve + radius defining one navigation environment.

    The runtime representation is a polyline resampled at uniform arc
    spacing ``ds`` with unit tangents; arc position s = index * ds.
    """

    def __init__(self, waypoints, radius: float = DEFAULT_RADIUS,
                 tube_id: str = "tube", ds: float = 1.0):
        self.waypoints = check_waypoints(waypoints)
        self.radius = check_positive(radius, "radius")
        self.tube_id = str(tube_id)

        chord = np.concatenate(
            ([0.0], np.cumsum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1))))
        self._spline = CubicSpline(chord, self.waypoints, axis=0, bc_type="natural")

        # arc-length table on a fine parameter grid (quadrature by dense chords,
        # well under 0.1 mm error at this resolution)
        n_fine = max(4096, 64 * len(self.waypoints))
        u_fine = np.linspace(chord[0], chord[-1], n_fine)
        p_fine = self._spline(u_fine)
        seg = np.linalg.norm(np.diff(p_fine, axis=0), axis=1)
        s_fine = np.concatenate(([0.0], np.cumsum(seg)))
        self._arc_params = u_fine
        self._arc_lengths = s_fine
        self.total_length = float(s_fine[-1])

        # uniform arc-spacing polyline used by the compiled kernels
        n_pts = max(int(round(self.total_length / ds)) + 1, 2)
        self.ds = self.total_length / (n_pts - 1)
        s_grid = np.linspace(0.0, self.total_length, n_pts)
        u_grid = np.interp(s_grid, s_fine, u_fine)
        self.points = np.ascontiguousarray(self._spline(u_grid))
        deriv = self._spline.derivative()(u_grid)
        self.tangents = np.ascontiguousarray(
            deriv / np.linalg.norm(deriv, axis=1, keepdims=True))

        self._check_bend_radius(u_fine)

        # reference frame at the tube entrance
        t0 = self.tangents[0]
        ref = np.array([0.0, 0.0, 1.0])
        if abs(float(t0 @ ref)) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        u0 = ref - (ref @ t0) * t0
        self.start_up = u0 / np.linalg.norm(u0)
        self.start_right = np.cross(t0, self.start_up)

    def _check_bend_radius(self, u_fine):
        d1 = self._spline.derivative(1)(u_fine)
        d2 = self._spline.derivative(2)(u_fine)
        speed = np.linalg.norm(d1, axis=1)
        kappa = np.linalg.norm(np.cross(d1, d2), axis=1) / np.maximum(speed, 1e-12) ** 3
        k_max = float(kappa.max())
        self.min_bend_radius = np.inf if k_max < 1e-12 else 1.0 / k_max
        if self.min_bend_radius < self.radius:
            raise GeometryError(
                f"{self.tube_id}: minimum bend radius {self.min_bend_radius:.1f} mm "
                f"is tighter than the tube radius {self.radius:.1f} mm")

    # -- queries -------------------------------------------------------------

    @property
    def arc_table(self):
        """(parameter, arc length) samples; strictly increasing in both."""
        return self._arc_params, self._arc_lengths

    def param_to_arc(self, u) -> np.ndarray:
        return np.interp(u, self._arc_params, self._arc_lengths)

    def point_at(self, s) -> np.ndarray:
        """Centerline point at arc position s (mm)."""
        u = np.interp(s, self._arc_lengths, self._arc_params)
        return self._spline(u)

    def tangent_at(self, s) -> np.ndarray:
        u = np.interp(s, self._arc_lengths, self._arc_params)
        d = self._spline.derivative()(u)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def nearest(self, point, j_guess: int | None = None):
        """Closest centerline point: returns (arc position s, distance, segment)."""
        p = np.asarray(point, dtype=np.float64)
        if j_guess is None:
            j, t, d2 = _kernels.nearest_point(p[0], p[1], p[2], self.points,
                                              0, self.points.shape[0] - 2)
        else:
            j, t, d2 = _kernels.nearest_point_windowed(p[0], p[1], p[2],
                                                       self.points, int(j_guess), 32)
        return (j + t) * self.ds, float(np.sqrt(d2)), int(j)

    def count_bends(self, sample_spacing: float = 10.0,
                    turn_threshold_deg: float = 2.0,
                    bend_threshold_deg: float = 90.0) -> int:
        """Count turning runs whose cumulative sweep exceeds the threshold.

        Tangents are sampled every ``sample_spacing`` mm; consecutive samples
        turning faster than ``turn_threshold_deg`` belong to one run.
        """
        s = np.arange(0.0, self.total_length, sample_spacing)
        tans = self.tangent_at(s)
        dots = np.clip(np.einsum("ij,ij->i", tans[:-1], tans[1:]), -1.0, 1.0)
        turn = np.degrees(np.arccos(dots))
        bends = 0
        acc = 0.0
        for a in turn:
            if a > turn_threshold_deg:
                acc += a
            else:
                if acc > bend_threshold_deg:
                    bends += 1
                acc = 0.0
        if acc > bend_threshold_deg:
            bends += 1
        return bends

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "id": self.tube_id,
            "radius_mm": self.radius,
            "waypoints": self.waypoints.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<dict>") -> "TubeModel":
        for key in ("id", "radius_mm", "waypoints"):
            if key not in doc:
                raise ValueError(f"{source}: missing field '{key}'")
        return cls(doc["waypoints"], radius=doc["radius_mm"], tube_id=doc["id"])

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TubeModel":
        with open(path, "r") as f:
            doc = json.load(f)
        return cls.from_dict(doc, source=str(path))


def builtin_tube(tube_id: str) -> TubeModel:
    """Load one of the tubes shipped with the package (tube0..tube3)."""
    if tube_id not in BUILTIN_TUBE_IDS:
        raise ValueError(f"unknown tube id {tube_id!r}, expected one of {BUILTIN_TUBE_IDS}")
    doc = json.loads(resources.files("safenav").joinpath(f"data/{tube_id}.json")
                     .read_text())
    return TubeModel.from_dict(doc, source=f"data/{tube_id}.json")


def resolve_tube(spec: str) -> TubeModel:
    """Accept a builtin tube id or a path to a tube spec file."""
    if spec in BUILTIN_TUBE_IDS:
        return builtin_tube(spec)
    return TubeModel.load(spec)
