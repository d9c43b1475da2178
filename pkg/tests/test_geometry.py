"""Tube geometry: arc lengths vs analytic values, bend counting, queries."""

import numpy as np
import pytest

from safenav.geometry import (BUILTIN_TUBE_IDS, GeometryError, TubeModel,
                              builtin_tube, resolve_tube)


def straight_tube(length=300.0, n=7, radius=20.0):
    x = np.linspace(0.0, length, n)
    pts = np.stack([x, np.zeros(n), np.zeros(n)], axis=1)
    return TubeModel(pts, radius=radius, tube_id="straight")


def quarter_circle_tube(r=100.0, n=11, radius=20.0):
    theta = np.linspace(0.0, np.pi / 2.0, n)
    pts = np.stack([r * np.sin(theta), r * (1.0 - np.cos(theta)),
                    np.zeros(n)], axis=1)
    return TubeModel(pts, radius=radius, tube_id="quarter")


def sweep_bend_count(points, spacing=10.0, turn_deg=2.0, bend_deg=90.0):
    """Independent tangent-sweep oracle on the resampled polyline."""
    # polyline points are uniformly arc-spaced; take every `spacing` mm
    step = max(int(round(spacing)), 1)
    sub = points[::step]
    tans = np.diff(sub, axis=0)
    tans /= np.linalg.norm(tans, axis=1, keepdims=True)
    dots = np.clip(np.einsum("ij,ij->i", tans[:-1], tans[1:]), -1.0, 1.0)
    turn = np.degrees(np.arccos(dots))
    bends, acc = 0, 0.0
    for a in turn:
        if a > turn_deg:
            acc += a
        else:
            if acc > bend_deg:
                bends += 1
            acc = 0.0
    if acc > bend_deg:
        bends += 1
    return bends


class TestArcLength:
    def test_straight_tube_length(self):
        tube = straight_tube(300.0)
        assert abs(tube.total_length - 300.0) < 0.1

    def test_quarter_circle_length_analytic(self):
        tube = quarter_circle_tube(100.0)
        assert abs(tube.total_length - 50.0 * np.pi) < 0.2

    def test_arc_table_strictly_increasing(self):
        tube = quarter_circle_tube()
        params, arcs = tube.arc_table
        assert (np.diff(params) > 0).all()
        assert (np.diff(arcs) > 0).all()
        assert arcs[-1] == tube.total_length

    def test_uniform_polyline_spacing(self):
        tube = quarter_circle_tube()
        seg = np.linalg.norm(np.diff(tube.points, axis=0), axis=1)
        assert abs(seg.mean() - tube.ds) < 1e-3
        assert seg.std() < 0.05


class TestValidation:
    def test_too_few_waypoints(self):
        with pytest.raises(ValueError, match="at least 4"):
            TubeModel([[0, 0, 0], [10, 0, 0], [20, 0, 0]])

    def test_duplicate_waypoints(self):
        with pytest.raises(ValueError, match="coincide"):
            TubeModel([[0, 0, 0], [10, 0, 0], [10, 0, 0], [20, 0, 0]])

    def test_degenerate_bend_radius_rejected(self):
        # hairpin with ~8 mm bend radius against a 20 mm tube radius
        pts = [[0, 0, 0], [40, 0, 0], [48, 8, 0], [40, 16, 0], [0, 16, 0]]
        with pytest.raises(GeometryError, match="bend radius"):
            TubeModel(pts, radius=20.0)

    def test_straight_tube_has_no_bend_limit(self):
        tube = straight_tube()
        assert tube.min_bend_radius == np.inf


class TestNearest:
    def test_on_axis_points(self):
        tube = straight_tube(300.0)
        s, d, _ = tube.nearest([150.0, 0.0, 0.0])
        assert abs(s - 150.0) < 0.51
        assert d < 1e-9

    def test_offset_distance(self):
        tube = straight_tube(300.0)
        s, d, _ = tube.nearest([100.0, 5.0, -3.0])
        assert abs(d - np.hypot(5.0, 3.0)) < 1e-6

    def test_windowed_matches_full_scan(self):
        tube = quarter_circle_tube()
        rng = np.random.default_rng(0)
        for _ in range(50):
            s_true = rng.random() * tube.total_length
            p = tube.point_at(s_true) + rng.normal(scale=3.0, size=3)
            s_full, d_full, j = tube.nearest(p)
            s_win, d_win, _ = tube.nearest(p, j_guess=j)
            assert abs(s_full - s_win) < 1e-9
            assert abs(d_full - d_win) < 1e-9

    def test_brute_force_oracle(self):
        tube = quarter_circle_tube()
        s_dense = np.linspace(0.0, tube.total_length, 20001)
        dense = tube.point_at(s_dense)
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = np.array([rng.uniform(0, 100), rng.uniform(0, 100),
                          rng.uniform(-10, 10)])
            _, d, _ = tube.nearest(p)
            d_oracle = np.linalg.norm(dense - p, axis=1).min()
            # 1 mm polyline chords vs the smooth curve: error ~ ds^2 * kappa / 8
            assert abs(d - d_oracle) < 5e-3


class TestBuiltins:
    def test_all_load(self):
        for tid in BUILTIN_TUBE_IDS:
            tube = builtin_tube(tid)
            assert tube.tube_id == tid
            assert tube.radius == 20.0
            assert tube.min_bend_radius >= tube.radius

    def test_unknown_id(self):
        with pytest.raises(ValueError, match="tube9"):
            builtin_tube("tube9")

    def test_complexity_grading(self):
        lengths = [builtin_tube(t).total_length for t in BUILTIN_TUBE_IDS]
        assert lengths == sorted(lengths)

    def test_bend_counts_tangent_sweep_oracle(self):
        # the hardest tube has exactly four >90 degree bends; the rest grade below
        counts = {tid: sweep_bend_count(builtin_tube(tid).points)
                  for tid in BUILTIN_TUBE_IDS}
        assert counts["tube0"] == 0
        assert counts["tube2"] == 2
        assert counts["tube3"] == 4
        # tube1 carries a single bend of about 90 degrees
        assert sweep_bend_count(builtin_tube("tube1").points, bend_deg=80.0) == 1

    def test_count_bends_method_agrees_with_oracle(self):
        for tid in BUILTIN_TUBE_IDS:
            tube = builtin_tube(tid)
            assert tube.count_bends() == sweep_bend_count(tube.points)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        tube = quarter_circle_tube()
        path = tmp_path / "q.json"
        tube.save(path)
        loaded = TubeModel.load(path)
        assert loaded.tube_id == tube.tube_id
        assert abs(loaded.total_length - tube.total_length) < 1e-9
        assert np.array_equal(loaded.waypoints, tube.waypoints)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"id": "x", "radius_mm": 20}')
        with pytest.raises(ValueError, match="waypoints"):
            TubeModel.load(path)

    def test_resolve_accepts_path_and_id(self, tmp_path):
        assert resolve_tube("tube0").tube_id == "tube0"
        path = tmp_path / "t.json"
        quarter_circle_tube().save(path)
        assert resolve_tube(str(path)).tube_id == "quarter"
