import numpy as np
import pytest
from scipy import stats

from dexdelay.control import PriorityLadder
from dexdelay.market import build_problem
from dexdelay.simulate import (
    Comparison,
    SimConfig,
    _trilinear,
    compare,
    evaluate_policy,
    sample_delays,
    simulate,
    simulate_path,
)
from dexdelay.solver import GridSpec, SolverOptions, solve

BOOK = dict(max_pending=1, volume_bound=28.0, pending_cap=np.inf)


def run(result, params, ladder, **kw):
    return simulate(result, params, ladder, **BOOK, sim=SimConfig(**kw))


class TestDeterminism:
    def test_bitwise_reproducible(self, small_solve, params, ladder):
        a = run(small_solve, params, ladder, n_paths=200, seed=42)
        b = run(small_solve, params, ladder, n_paths=200, seed=42)
        np.testing.assert_array_equal(a.j_paths, b.j_paths)
        assert a.n_submitted == b.n_submitted
        assert a.n_executed == b.n_executed

    def test_seed_changes_paths(self, small_solve, params, ladder):
        a = run(small_solve, params, ladder, n_paths=200, seed=42)
        b = run(small_solve, params, ladder, n_paths=200, seed=43)
        assert not np.array_equal(a.j_paths, b.j_paths)


class TestAccounting:
    def test_objective_decomposition(self, small_solve, params, ladder):
        out = run(small_solve, params, ladder, n_paths=300, seed=0)
        np.testing.assert_array_equal(
            out.j_paths, out.running + out.execution + out.terminal)

    def test_execution_zero_without_fills(self, params, ladder):
        problem = build_problem(params, ladder, max_pending=0,
                                volume_bound=28.0, pending_cap=np.inf)
        grid = GridSpec.build(problem, t_steps=60, s_count=21, z_count=21,
                              q_count=21)
        res = solve(problem, grid, SolverOptions())
        out = simulate(res, params, ladder, max_pending=0, volume_bound=28.0,
                       pending_cap=np.inf, sim=SimConfig(n_paths=300, seed=2))
        assert out.n_submitted == 0 and out.n_executed == 0
        np.testing.assert_array_equal(out.execution, 0.0)
        # from q = 0 the no-impulse optimum trades nothing and scores zero
        assert abs(out.mean) < 1e-9

    def test_executions_never_exceed_submissions(self, small_solve, params,
                                                 ladder):
        out = run(small_solve, params, ladder, n_paths=300, seed=1)
        assert 0 < out.n_executed <= out.n_submitted


class TestRecords:
    def test_order_events(self, small_solve, params, ladder):
        rec = simulate_path(small_solve, params, ladder, **BOOK,
                            sim=SimConfig(seed=4))
        assert rec.times[0] == 0.0
        assert rec.s.size == rec.times.size == rec.q.size
        assert rec.q[0] == 0.0 and rec.cash[0] == 0.0
        for order in rec.orders:
            assert order["level"] in (0, 1, 2)
            assert abs(order["size"]) in (7.0, 14.0, 21.0, 28.0)
            if order["execute_time"] is not None:
                assert order["execute_time"] > order["submit_time"]
        assert rec.objective == pytest.approx(rec.objective)

    def test_inventory_jumps_only_at_fills(self, small_solve, params, ladder,
                                           small_grid):
        """Between fills the inventory moves at most nu_max per unit time."""
        rec = simulate_path(small_solve, params, ladder, **BOOK,
                            sim=SimConfig(seed=4))
        dt = rec.times[1] - rec.times[0]
        fills = [o["execute_time"] for o in rec.orders
                 if o["execute_time"] is not None]
        dq = np.abs(np.diff(rec.q))
        big = np.nonzero(dq > 35.0 * dt * (1 + 1e-9))[0]
        for step in big:
            lo, hi = rec.times[step], rec.times[step + 1]
            assert any(lo <= ft <= hi + dt for ft in fills)

    def test_as_dict_serializable(self, small_solve, params, ladder):
        import json
        rec = simulate_path(small_solve, params, ladder, **BOOK,
                            sim=SimConfig(seed=4))
        json.dumps(rec.as_dict())


class TestValidation:
    def test_coarser_than_pde_rejected(self, small_solve, params, ladder):
        with pytest.raises(ValueError, match="PDE step"):
            run(small_solve, params, ladder, n_paths=10, n_steps=30)

    def test_rate_dt_bound(self, small_solve, params):
        fast = PriorityLadder(fees=(100.0, 300.0, 500.0), rates=(2.0, 2.5, 4.0))
        with pytest.raises(ValueError, match="rate"):
            simulate(small_solve, params, fast, **BOOK,
                     sim=SimConfig(n_paths=10))

    def test_random_tables_need_flag(self, small_problem, small_grid, params,
                                     ladder):
        res = solve(small_problem, small_grid, SolverOptions(fee_mode="random"))
        with pytest.raises(ValueError, match="randomize_level"):
            simulate(res, params, ladder, **BOOK, sim=SimConfig(n_paths=10))
        out = simulate(res, params, ladder, **BOOK,
                       sim=SimConfig(n_paths=50, randomize_level=True))
        assert out.j_paths.size == 50

    def test_sim_config_bounds(self):
        with pytest.raises(ValueError):
            SimConfig(n_paths=0)
        with pytest.raises(ValueError):
            SimConfig(n_steps=0)

    def test_evaluate_policy_needs_paths(self, small_solve, params, ladder):
        with pytest.raises(ValueError, match="100"):
            evaluate_policy(small_solve, params, ladder, **BOOK,
                            sim=SimConfig(n_paths=50))
        mean, se = evaluate_policy(small_solve, params, ladder, **BOOK,
                                   sim=SimConfig(n_paths=200, seed=9))
        assert se > 0 and np.isfinite(mean)


class TestDelays:
    @pytest.mark.parametrize("rate", [2.0, 2.5, 3.0])
    def test_exponential_law(self, rate):
        d = sample_delays(rate, 10_000, dt=1.0 / 60, seed=5)
        assert d.size == 10_000
        assert d.mean() == pytest.approx(1.0 / rate, abs=3.0 / rate / 100)
        p = stats.kstest(d, "expon", args=(0.0, 1.0 / rate)).pvalue
        assert p > 0.01

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            sample_delays(0.0, 10, 0.01)
        with pytest.raises(ValueError):
            sample_delays(1.0, 10, 0.0)

    def test_in_sim_delays_positive(self, small_solve, params, ladder):
        out = run(small_solve, params, ladder, n_paths=500, seed=0)
        for d in out.delays:
            assert (d > 0).all()
            # executed within the horizon, so right-truncated at T
            assert d.max() <= params.horizon


class TestMonteCarloAgainstPde:
    def test_mean_matches_value(self, small_solve, small_grid, params, ladder):
        out = run(small_solve, params, ladder, n_paths=2000, seed=1)
        empty = next(i for i, c in enumerate(small_grid.configs)
                     if c.is_empty())
        mid = tuple(ax.size // 2 for ax in (small_grid.s_axis,
                                            small_grid.z_axis,
                                            small_grid.q_axis))
        v0c = float(small_solve.value.at(0)[(empty,) + mid])
        # coarse grid: allow sampling error plus a discretization band
        assert abs(out.mean - v0c) <= 4 * out.std_error + 0.25 * abs(v0c)


class TestCompare:
    def test_optimal_beats_randomized(self, small_solve, params, ladder):
        opt = run(small_solve, params, ladder, n_paths=2000, seed=1)
        rnd = run(small_solve, params, ladder, n_paths=2000, seed=1,
                  randomize_level=True)
        out = compare(opt, rnd)
        assert out.diff_mean > 0
        assert out.significant_95
        assert out.diff_quantiles["p5"] <= out.diff_quantiles["p95"]
        assert isinstance(out, Comparison)

    def test_seed_mismatch(self, small_solve, params, ladder):
        a = run(small_solve, params, ladder, n_paths=100, seed=1)
        b = run(small_solve, params, ladder, n_paths=100, seed=2)
        with pytest.raises(ValueError, match="seed"):
            compare(a, b)

    def test_size_mismatch(self, small_solve, params, ladder):
        a = run(small_solve, params, ladder, n_paths=100, seed=1)
        b = run(small_solve, params, ladder, n_paths=150, seed=1)
        with pytest.raises(ValueError, match="path counts"):
            compare(a, b)


class TestTrilinear:
    def test_exact_on_linear_table(self, small_grid):
        g = small_grid
        S = g.s_axis[:, None, None]
        Z = g.z_axis[None, :, None]
        Q = g.q_axis[None, None, :]
        table = np.stack([2.0 * S + 0.5 * Z - 3.0 * Q + 1.0] * 2)
        rng = np.random.default_rng(0)
        s = rng.uniform(g.s_axis[0], g.s_axis[-1], 50)
        z = rng.uniform(g.z_axis[0], g.z_axis[-1], 50)
        q = rng.uniform(g.q_axis[0], g.q_axis[-1], 50)
        cfg = rng.integers(0, 2, 50)
        got = _trilinear(table, cfg, s, z, q, (g.s_axis, g.z_axis, g.q_axis))
        np.testing.assert_allclose(got, 2 * s + 0.5 * z - 3 * q + 1, rtol=1e-9)

    def test_clamps_outside(self, small_grid):
        g = small_grid
        table = np.ones((1,) + g.shape)
        got = _trilinear(table, np.zeros(2, dtype=int),
                         np.array([0.0, 1e6]), np.array([0.0, 1e6]),
                         np.array([-1e3, 1e3]),
                         (g.s_axis, g.z_axis, g.q_axis))
        np.testing.assert_allclose(got, 1.0)
