import csv

import numpy as np
import pytest

from dexdelay.errors import OffGrid
from dexdelay.policy import (
    extract_region,
    fee_map,
    ladder_recipe,
    nu_sensitivity,
    smooth_fit_diagnostic,
    value_norm_sweep,
    write_region_csv,
    write_region_png,
)
from dexdelay.solver import SolverOptions, solve


@pytest.fixture(scope="module")
def mid_time(small_grid):
    return small_grid.time_of(small_grid.t_steps // 2)


class TestExtractRegion:
    def test_matches_tables(self, small_solve, small_grid, mid_time):
        pol = small_solve.policy
        region = extract_region(pol, mid_time, 0.0)
        ti = small_grid.t_index_of(mid_time)
        qi = int(np.argmin(np.abs(small_grid.q_axis)))
        pos = next(p for p, i in enumerate(pol.subcap_config_indices)
                   if small_grid.configs[i].is_empty())
        np.testing.assert_array_equal(
            region.continuation, pol.continuation[ti, pos, :, :, qi])
        sizes = np.asarray(small_grid.volume_grid)
        ex = ~region.continuation
        want = sizes[pol.impulse_size_idx[ti, pos, :, :, qi][ex]]
        np.testing.assert_array_equal(region.size[ex], want)
        assert (region.size[~ex] == 0.0).all()
        assert (region.level[~ex] == -1).all()

    def test_exercise_sign_coherence(self, small_solve, small_grid, mid_time):
        """At the inventory extremes, exercised orders reduce the position."""
        q_hi = small_grid.q_axis[-1]
        hi = extract_region(small_solve.policy, mid_time, q_hi)
        ex = ~hi.continuation
        if ex.any():
            assert (hi.size[ex] < 0).all()
        lo = extract_region(small_solve.policy, mid_time, small_grid.q_axis[0])
        ex = ~lo.continuation
        if ex.any():
            assert (lo.size[ex] > 0).all()

    def test_off_grid(self, small_solve, small_grid):
        with pytest.raises(OffGrid):
            extract_region(small_solve.policy, small_grid.horizon, 0.0)
        with pytest.raises(OffGrid):
            extract_region(small_solve.policy, small_grid.dt * 0.5, 0.0)
        with pytest.raises(OffGrid):
            extract_region(small_solve.policy, 0.0, 0.123)

    def test_random_mode_rejected(self, small_problem, small_grid):
        res = solve(small_problem, small_grid, SolverOptions(fee_mode="random"))
        with pytest.raises(ValueError):
            extract_region(res.policy, 0.0, 0.0)

    def test_label(self, small_solve, mid_time):
        region = extract_region(small_solve.policy, mid_time, 0.0)
        labels = {region.label(i, j) for i in range(region.s_axis.size)
                  for j in range(region.z_axis.size)}
        assert any(l == "CONTINUE" for l in labels)
        for l in labels:
            assert l == "CONTINUE" or l.startswith("EXERCISE(level=")

    def test_exercise_measure(self, small_solve, mid_time):
        region = extract_region(small_solve.policy, mid_time, 0.0)
        assert region.exercise_measure == int((~region.continuation).sum())


class TestFeeMap:
    def test_levels_valid(self, small_solve, small_grid, mid_time):
        lv = fee_map(small_solve.policy, mid_time, 0.0)
        region = extract_region(small_solve.policy, mid_time, 0.0)
        assert set(np.unique(lv[~region.continuation])) <= {0, 1, 2}
        assert (lv[region.continuation] == -1).all()


class TestLadderRecipe:
    def test_values(self):
        lad = ladder_recipe(3)
        assert lad.fees == (100.0, 300.0, 500.0)
        assert lad.rates == (2.0, 2.5, 3.0)

    def test_nesting(self):
        big = ladder_recipe(4)
        assert big.prefix(3).fees == ladder_recipe(3).fees
        assert big.prefix(3).rates == ladder_recipe(3).rates

    def test_invalid(self):
        with pytest.raises(ValueError):
            ladder_recipe(0)


class TestValueNormSweep:
    def test_single_level(self, small_problem, small_grid, params):
        rows = value_norm_sweep(small_problem, small_grid, [1])
        assert len(rows) == 1
        assert rows[0]["n_levels"] == 1
        assert rows[0]["norm"] > 0
        # v0 at the center stays within the plausible band for this model
        assert 0.0 < rows[0]["v0_center"] < 10_000.0

    def test_three_levels_matches_direct(self, small_problem, small_grid,
                                         small_solve):
        """The recipe at N=3 is exactly the desk ladder, so the sweep entry
        must equal the direct solve."""
        rows = value_norm_sweep(small_problem, small_grid, [3])
        g = small_grid
        empty = next(i for i, c in enumerate(g.configs) if c.is_empty())
        v0 = small_solve.value.at(0)[empty]
        assert rows[0]["norm"] == pytest.approx(float(np.linalg.norm(v0)),
                                                rel=1e-12)


class TestSmoothFit:
    def test_reports_boundary_faces(self, small_solve, small_grid, mid_time):
        out = smooth_fit_diagnostic(small_solve.value, small_solve.policy,
                                    small_grid.time_of(0))
        assert out["n_faces"] + out["excluded"] >= 0
        if out["n_faces"]:
            assert out["max"] >= out["mean"] >= 0.0

    def test_unstored_time_rejected(self, small_solve, small_grid):
        stored = set(small_solve.value.t_indices.tolist())
        missing = next(i for i in range(small_grid.t_steps)
                       if i not in stored)
        with pytest.raises(OffGrid):
            smooth_fit_diagnostic(small_solve.value, small_solve.policy,
                                  small_grid.time_of(missing))


class TestNuSensitivity:
    def test_reports(self, small_solve, mid_time):
        out = nu_sensitivity(small_solve.policy, mid_time)
        assert out["range_over_s"] >= 0.0
        assert out["range_over_q"] > 0.0
        assert out["ratio_q_over_s"] > 0.0


class TestWriters:
    def test_csv(self, small_solve, small_grid, mid_time, tmp_path):
        region = extract_region(small_solve.policy, mid_time, 0.0)
        path = tmp_path / "region.csv"
        write_region_csv(region, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == small_grid.s_axis.size * small_grid.z_axis.size
        labels = {r["label"] for r in rows}
        assert labels <= {"CONTINUE", "EXERCISE"}
        for r in rows[:50]:
            if r["label"] == "CONTINUE":
                assert r["level"] == "-1" and float(r["size"]) == 0.0

    def test_png(self, small_solve, mid_time, tmp_path):
        region = extract_region(small_solve.policy, mid_time, 0.0)
        for color_by in ("size", "level"):
            path = tmp_path / f"region_{color_by}.png"
            write_region_png(region, path, color_by=color_by, title="t=0.5")
            assert path.stat().st_size > 1000
        with pytest.raises(ValueError):
            write_region_png(region, tmp_path / "bad.png", color_by="time")
