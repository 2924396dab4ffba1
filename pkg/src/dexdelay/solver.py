"""Backward-in-time finite-difference solver for the HJB quasi-variational
inequality over the (t, s, z, q) grid and the set of pending-order
configurations.

Scheme: explicit Euler in time, central second differences, upwinded first
differences for the mean-reversion drift and the inventory advection. The
continuous-control supremum is closed form via the first-order condition
nu* = (dv/dq - s) / (2k), clipped to a box so the q-advection respects the
grid. After each PDE step the intervention obstacle is applied, sweeping
configurations in decreasing pending-count order (a submission always points
to a configuration with strictly more pending orders, so one ordered sweep
reaches the per-step fixed point).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .control import (
    PendingConfig,
    ProblemSpec,
    config_after_execute,
    config_after_submit,
    enumerate_configs,
)
from .errors import NoAdmissibleImpulse, StabilityViolation
from .market import MarketParams, psi, swap_cashflow


@dataclass(eq=False)
class GridSpec:
    """Discretization of (t, s, z, q) plus the pending-configuration set."""

    t_steps: int
    s_axis: np.ndarray
    z_axis: np.ndarray
    q_axis: np.ndarray
    configs: list[PendingConfig]
    volume_grid: tuple[float, ...]
    horizon: float

    def __post_init__(self):
        self.s_axis = np.asarray(self.s_axis, dtype=float)
        self.z_axis = np.asarray(self.z_axis, dtype=float)
        self.q_axis = np.asarray(self.q_axis, dtype=float)
        for name, ax in (("s", self.s_axis), ("z", self.z_axis), ("q", self.q_axis)):
            if ax.size < 3:
                raise ValueError(f"{name} axis needs at least 3 points")
            d = np.diff(ax)
            if not np.allclose(d, d[0]):
                raise ValueError(f"{name} axis must be uniform")
        if np.any(self.s_axis <= 0) or np.any(self.z_axis <= 0):
            raise ValueError("s and z axes must be strictly positive")
        if abs(self.q_axis[0] + self.q_axis[-1]) > 1e-9 * (1 + abs(self.q_axis[-1])):
            raise ValueError("q axis must be symmetric about zero")
        if self.t_steps < 0:
            raise ValueError("t_steps must be >= 0")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @classmethod
    def build(cls, problem: ProblemSpec, *, t_steps: int,
              s_count: int = 61, z_count: int = 61, q_count: int = 41,
              s_halfwidth: float | None = None, z_halfwidth: float | None = None,
              q_max: float = 25.0) -> "GridSpec":
        """Desk-default grid centered on the market's initial prices,
        spanning +-3 CEX sigma unless half-widths are given."""
        market: MarketParams = problem.extras["market"]
        sw = 3.0 * market.sigma_s if s_halfwidth is None else s_halfwidth
        zw = sw if z_halfwidth is None else z_halfwidth
        s_axis = np.linspace(market.s0 - sw, market.s0 + sw, s_count)
        z_axis = np.linspace(market.z0 - zw, market.z0 + zw, z_count)
        q_axis = np.linspace(-q_max, q_max, q_count)
        grid_vals = default_volume_grid(problem.volume_bound)
        configs = enumerate_configs(problem.ladder, problem.max_pending, grid_vals,
                                    volume_bound=problem.volume_bound,
                                    pending_cap=problem.pending_cap)
        return cls(t_steps=t_steps, s_axis=s_axis, z_axis=z_axis, q_axis=q_axis,
                   configs=configs, volume_grid=tuple(grid_vals),
                   horizon=problem.horizon)

    @property
    def dt(self) -> float:
        return self.horizon / max(self.t_steps, 1)

    @property
    def shape(self):
        return (self.s_axis.size, self.z_axis.size, self.q_axis.size)

    def time_of(self, t_index: int) -> float:
        return t_index * self.dt

    def t_index_of(self, t: float) -> int:
        idx = t / self.dt
        j = int(round(idx))
        if abs(idx - j) > 1e-6 or not (0 <= j <= self.t_steps):
            from .errors import OffGrid
            raise OffGrid(f"t={t} is not a grid time")
        return j


def default_volume_grid(volume_bound: float, points_per_sign: int = 4) -> list[float]:
    """Symmetric order-size menu excluding zero."""
    pos = [volume_bound * (i + 1) / points_per_sign for i in range(points_per_sign)]
    return sorted([-x for x in pos] + pos)


def cfl_time_steps(problem: ProblemSpec, grid: GridSpec, nu_max: float,
                   safety: float = 0.9) -> tuple[float, int]:
    """Stability bound on dt and the number of steps at `safety` times it."""
    market: MarketParams = problem.extras["market"]
    ds = grid.s_axis[1] - grid.s_axis[0]
    dz = grid.z_axis[1] - grid.z_axis[0]
    dq = grid.q_axis[1] - grid.q_axis[0]
    drift_max = market.kappa * max(
        abs(grid.s_axis[-1] - grid.z_axis[0]), abs(grid.z_axis[-1] - grid.s_axis[0]))
    denom = (market.sigma_s ** 2 / ds ** 2 + market.sigma_z ** 2 / dz ** 2
             + drift_max / dz + sum(problem.ladder.rates) + nu_max / dq)
    dt_max = 1.0 / denom
    return dt_max, int(np.ceil(grid.horizon / (safety * dt_max)))


@dataclass
class SolverOptions:
    nu_max: float = 35.0
    growth_cap: float = 50.0  # multiple of the terminal-fitted envelope constant
    exercise_tol_rel: float = 1e-6
    store_value_every: int | None = None  # None: auto (<= ~12 stored slices)
    store_nu_every: int | None = None  # None: auto (<= ~41 stored slices)
    fee_mode: str = "optimal"  # "optimal" | "random" (uniform over levels)
    check_cfl: bool = True
    nu_dtype: type = np.float32


@dataclass
class ValueField:
    """Value array at a set of stored time indices (always includes 0 and T)."""

    grid: GridSpec
    t_indices: np.ndarray  # sorted stored time indices
    values: np.ndarray  # (n_stored, n_cfg, ns, nz, nq)

    def at(self, t_index: int) -> np.ndarray:
        pos = np.searchsorted(self.t_indices, t_index)
        if pos >= self.t_indices.size or self.t_indices[pos] != t_index:
            raise KeyError(f"time index {t_index} not stored")
        return self.values[pos]

    @property
    def stores_every_step(self) -> bool:
        return self.t_indices.size == self.grid.t_steps + 1


@dataclass
class PolicyTables:
    """Per-node policy extracted during the backward sweep.

    Exercise decisions are stored at every time step for configurations below
    capacity; the continuous rate nu* is stored for every configuration at a
    (possibly coarser) time stride, nearest-lookup in time.
    """

    grid: GridSpec
    subcap_config_indices: np.ndarray  # config indices with total_count < K
    continuation: np.ndarray  # bool (t_steps, n_subcap, ns, nz, nq)
    impulse_level: np.ndarray  # int8, -1 where continuation
    impulse_size_idx: np.ndarray  # int8 index into grid.volume_grid, -1 where
    # continuation; in random fee mode an extra level axis follows n_subcap
    nu_t_indices: np.ndarray
    nu_star: np.ndarray  # (n_nu_t, n_cfg, ns, nz, nq)
    fee_mode: str = "optimal"

    def impulse_size(self, size_idx: np.ndarray) -> np.ndarray:
        sizes = np.asarray(self.grid.volume_grid)
        out = np.where(size_idx >= 0, sizes[np.clip(size_idx, 0, sizes.size - 1)], 0.0)
        return out

    def nu_slice(self, t_index: int) -> np.ndarray:
        pos = np.argmin(np.abs(self.nu_t_indices - t_index))
        return self.nu_star[pos]


@dataclass
class SolveResult:
    value: ValueField
    policy: PolicyTables
    residual_max: np.ndarray  # per backward step
    residual_mean: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def riccati_reference(params: MarketParams, t_grid: np.ndarray) -> np.ndarray:
    """Backward Riccati coefficient for the no-impulse limit.

    theta'(t) = phi - theta(t)^2 / k with theta(T) = -Xi; the no-impulse value
    is q*s + theta(t)*q^2. Integrated with an adaptive high-order method at
    tolerances far below the PDE resolution.
    """
    k = params.temp_impact
    if k <= 0:
        raise ValueError("temp_impact must be positive")
    t_grid = np.asarray(t_grid, dtype=float)
    T = params.horizon
    if np.any(t_grid < 0) or np.any(t_grid > T + 1e-12):
        raise ValueError("t_grid must lie in [0, horizon]")

    def rhs(t, theta):
        return params.running_penalty - theta ** 2 / k

    # integrate backward from T; solve_ivp needs t_eval sorted decreasing
    idx_desc = np.argsort(-t_grid, kind="stable")
    sol = solve_ivp(rhs, (T, 0.0), [-params.terminal_penalty],
                    t_eval=np.minimum(t_grid[idx_desc], T),
                    rtol=1e-10, atol=1e-12, method="RK45")
    theta = np.empty_like(t_grid)
    theta[idx_desc] = sol.y[0]
    return theta


class QviSolver:
    """Explicit finite-difference solver for one problem/grid pair."""

    def __init__(self, problem: ProblemSpec, grid: GridSpec,
                 options: SolverOptions | None = None):
        self.problem = problem
        self.grid = grid
        self.opt = options or SolverOptions()
        self.market: MarketParams = problem.extras["market"]
        if self.opt.fee_mode not in ("optimal", "random"):
            raise ValueError("fee_mode must be 'optimal' or 'random'")
        if self.opt.check_cfl and grid.t_steps > 0:
            dt_max, _ = cfl_time_steps(problem, grid, self.opt.nu_max)
            if grid.dt > dt_max * (1 + 1e-12):
                raise ValueError(
                    f"dt={grid.dt:.3e} violates the stability bound {dt_max:.3e}; "
                    "increase t_steps or reduce nu_max")
        self._prepare()

    # ---- geometry and transition tables -------------------------------

    def _prepare(self):
        g = self.grid
        self.ds = g.s_axis[1] - g.s_axis[0]
        self.dz = g.z_axis[1] - g.z_axis[0]
        self.dq = g.q_axis[1] - g.q_axis[0]
        self.S = g.s_axis[:, None, None]
        self.Z = g.z_axis[None, :, None]
        self.Q = g.q_axis[None, None, :]
        self.drift_z = self.market.kappa * (self.S - self.Z)  # (ns, nz, 1)

        self.n_cfg = len(g.configs)
        self.cfg_index = {c.key(): i for i, c in enumerate(g.configs)}
        K = self.problem.max_pending
        self.subcap = np.array([i for i, c in enumerate(g.configs)
                                if c.total_count < K], dtype=int)

        # submit candidates per sub-capacity config, in tie-break priority
        # order: lowest level, then smallest |size|, then negative first.
        # A submission is admissible at a node only if the post-trade
        # inventory q + size stays on the grid; orders the lattice cannot
        # represent are never optimal to model.
        sizes_ordered = sorted(g.volume_grid, key=lambda x: (abs(x), x > 0))
        self.size_pos = {round(v, 9): j for j, v in enumerate(g.volume_grid)}
        qa = g.q_axis
        tol = 1e-9 * (1 + abs(qa[-1]))
        self.size_qmask = {
            j: ((qa + v >= qa[0] - tol) & (qa + v <= qa[-1] + tol))[None, None, :]
            for j, v in enumerate(g.volume_grid)}
        self.submit_cands: dict[int, list[tuple[int, int, int]]] = {}
        for i in self.subcap:
            cfg = g.configs[i]
            cands = []
            for level in range(self.problem.ladder.n_levels):
                for size in sizes_ordered:
                    if cfg.total_abs_volume + abs(size) > self.problem.pending_cap + 1e-12:
                        continue
                    tgt = config_after_submit(
                        cfg, level, size, max_pending=K,
                        volume_bound=self.problem.volume_bound,
                        pending_cap=self.problem.pending_cap)
                    j = self.cfg_index.get(tgt.key())
                    if j is not None:
                        cands.append((level, self.size_pos[round(size, 9)], j))
            self.submit_cands[int(i)] = cands

        # execution transitions: per config, per pending level, the target
        # config, interpolation stencils for the post-impulse (z, q) point,
        # and the cash flow added to wealth at execution
        self._interp_cache: dict[float, tuple] = {}
        self.exec_terms: dict[int, list[dict]] = {}
        self.clamped_nodes = 0
        self.extrapolated_nodes = 0
        for i, cfg in enumerate(g.configs):
            terms = []
            for level, count in enumerate(cfg.counts):
                if count == 0:
                    continue
                tgt, vol = config_after_execute(cfg, level)
                j = self.cfg_index[tgt.key()]
                iz0, iz1, wz, iq0, iq1, wq, clamped, extrap = self._impulse_stencil(vol)
                self.clamped_nodes += clamped
                self.extrapolated_nodes += extrap
                cash = (swap_cashflow(vol, g.z_axis, self.market.depth)
                        - self.problem.ladder.fees[level]) if vol != 0.0 else (
                    np.zeros_like(g.z_axis) - self.problem.ladder.fees[level])
                terms.append(dict(level=level, vol=vol, target=j,
                                  rate=self.problem.ladder.rates[level],
                                  iz0=iz0, iz1=iz1, wz=wz,
                                  iq0=iq0, iq1=iq1, wq=wq,
                                  cash=cash[None, :, None]))
            self.exec_terms[i] = terms

        self.envelope = 1.0 + self.S ** 2 + self.Z ** 2 + self.Q ** 2
        g_term = self.Q * self.S - self.market.terminal_penalty * self.Q ** 2
        self._c2_terminal = max(1.0, float((np.abs(g_term) / self.envelope).max()))

    def _impulse_stencil(self, vol: float):
        """Linear interpolation stencils for z -> z + psi(z)*vol and
        q -> q + vol.

        z is clamped to the grid (the impact is small next to the z range).
        q is extrapolated linearly from the edge cell: clamping q would let
        the scheme book swap cash without the matching inventory move, an
        arbitrage the obstacle immediately exploits.
        """
        key = round(vol, 9)
        if key in self._interp_cache:
            return self._interp_cache[key]
        g = self.grid
        z_new = g.z_axis + psi(g.z_axis, self.market.depth) * vol
        q_new = g.q_axis + vol
        clamped = int(np.sum((z_new < g.z_axis[0]) | (z_new > g.z_axis[-1])))
        extrap = int(np.sum((q_new < g.q_axis[0]) | (q_new > g.q_axis[-1])))

        def stencil(x_new, axis, clamp):
            if clamp:
                x_new = np.clip(x_new, axis[0], axis[-1])
            pos = (x_new - axis[0]) / (axis[1] - axis[0])
            i0 = np.clip(np.floor(pos).astype(int), 0, axis.size - 2)
            w = pos - i0
            return i0, i0 + 1, w

        iz0, iz1, wz = stencil(z_new, g.z_axis, clamp=True)
        iq0, iq1, wq = stencil(q_new, g.q_axis, clamp=False)
        out = (iz0, iz1, wz, iq0, iq1, wq, clamped, extrap)
        self._interp_cache[key] = out
        return out

    # ---- discrete operators --------------------------------------------

    def _dv_z_upwind(self, v: np.ndarray) -> np.ndarray:
        fwd = np.empty_like(v)
        fwd[:, :-1, :] = (v[:, 1:, :] - v[:, :-1, :]) / self.dz
        fwd[:, -1, :] = (v[:, -1, :] - v[:, -2, :]) / self.dz
        bwd = np.empty_like(v)
        bwd[:, 1:, :] = (v[:, 1:, :] - v[:, :-1, :]) / self.dz
        bwd[:, 0, :] = (v[:, 1, :] - v[:, 0, :]) / self.dz
        return np.where(self.drift_z > 0, fwd, bwd)

    def _d2(self, v: np.ndarray, axis: int, h: float) -> np.ndarray:
        """Central second difference; zero at the boundary (linear extrapolation)."""
        out = np.zeros_like(v)
        sl = [slice(None)] * 3
        lo, mid, hi = sl.copy(), sl.copy(), sl.copy()
        lo[axis], mid[axis], hi[axis] = slice(0, -2), slice(1, -1), slice(2, None)
        out[tuple(mid)] = (v[tuple(hi)] - 2 * v[tuple(mid)] + v[tuple(lo)]) / h ** 2
        return out

    def _dv_q_central(self, v: np.ndarray) -> np.ndarray:
        """Central in the interior, second-order one-sided at the q edges."""
        out = np.empty_like(v)
        out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * self.dq)
        out[..., 0] = (-3 * v[..., 0] + 4 * v[..., 1] - v[..., 2]) / (2 * self.dq)
        out[..., -1] = (3 * v[..., -1] - 4 * v[..., -2] + v[..., -3]) / (2 * self.dq)
        return out

    def nu_star(self, v: np.ndarray) -> np.ndarray:
        """Optimal CEX rate from the first-order condition, clipped to the
        rate box and toward the interior at the q edges."""
        nu = (self._dv_q_central(v) - self.S) / (2 * self.market.temp_impact)
        nu = np.clip(nu, -self.opt.nu_max, self.opt.nu_max)
        nu[..., 0] = np.clip(nu[..., 0], 0.0, self.opt.nu_max)
        nu[..., -1] = np.clip(nu[..., -1], -self.opt.nu_max, 0.0)
        return nu

    def hamiltonian_continuous(self, v: np.ndarray) -> np.ndarray:
        """Generator plus optimized running reward, without the execution term."""
        m = self.market
        v_z = self._dv_z_upwind(v)
        v_zz = self._d2(v, 1, self.dz)
        v_ss = self._d2(v, 0, self.ds)
        nu = self.nu_star(v)
        fwd = np.empty_like(v)
        fwd[..., :-1] = (v[..., 1:] - v[..., :-1]) / self.dq
        fwd[..., -1] = (v[..., -1] - v[..., -2]) / self.dq
        bwd = np.empty_like(v)
        bwd[..., 1:] = (v[..., 1:] - v[..., :-1]) / self.dq
        bwd[..., 0] = (v[..., 1] - v[..., 0]) / self.dq
        v_q_up = np.where(nu > 0, fwd, bwd)
        nu_term = nu * v_q_up - nu * (self.S + m.temp_impact * nu)
        return (self.drift_z * v_z + 0.5 * m.sigma_z ** 2 * v_zz
                + 0.5 * m.sigma_s ** 2 * v_ss + nu_term
                - m.running_penalty * self.Q ** 2)

    def execution_term(self, cfg_idx: int, v_all: np.ndarray) -> np.ndarray:
        """Rate-weighted expected change from executions of pending orders."""
        out = np.zeros(self.grid.shape)
        v_here = v_all[cfg_idx]
        for term in self.exec_terms[cfg_idx]:
            vt = v_all[term["target"]]
            vz = vt[:, term["iz0"], :] * (1 - term["wz"])[None, :, None] \
                + vt[:, term["iz1"], :] * term["wz"][None, :, None]
            vzq = vz[:, :, term["iq0"]] * (1 - term["wq"])[None, None, :] \
                + vz[:, :, term["iq1"]] * term["wq"][None, None, :]
            out += term["rate"] * (vzq - v_here + term["cash"])
        return out

    def intervention_max(self, cfg_idx: int, v_all: np.ndarray):
        """Best submission value and argmax (level, size index) per node,
        with deterministic tie-breaking."""
        cands = self.submit_cands[int(cfg_idx)]
        if not cands:
            raise NoAdmissibleImpulse(
                f"no admissible (level, size) from config {cfg_idx}")
        if self.opt.fee_mode == "random":
            # level drawn uniformly at submission: the obstacle is the mean
            # over levels of the per-level best size, whose argmax is kept
            # per level for the simulator
            n_lev = self.problem.ladder.n_levels
            per_level = np.full((n_lev,) + self.grid.shape, -np.inf)
            siz = np.full((n_lev,) + self.grid.shape, -1, dtype=np.int8)
            for level, size_idx, tgt in cands:
                better = (v_all[tgt] > per_level[level]) & self.size_qmask[size_idx]
                if better.any():
                    np.copyto(per_level[level], v_all[tgt], where=better)
                    siz[level][better] = size_idx
            best = per_level.mean(axis=0)
            lev = np.zeros(self.grid.shape, dtype=np.int8)
            return best, lev, siz
        best = np.full(self.grid.shape, -np.inf)
        lev = np.full(self.grid.shape, -1, dtype=np.int8)
        siz = np.full(self.grid.shape, -1, dtype=np.int8)
        for level, size_idx, tgt in cands:
            better = (v_all[tgt] > best) & self.size_qmask[size_idx]
            if better.any():
                np.copyto(best, v_all[tgt], where=better)
                lev[better] = level
                siz[better] = size_idx
        return best, lev, siz

    # ---- backward sweep -------------------------------------------------

    def _size_table_shape(self, n_sub: int) -> tuple:
        """Shape of the impulse-size table: random mode keeps the per-level
        argmax size since the level is only drawn at submission time."""
        if self.opt.fee_mode == "random":
            return (n_sub, self.problem.ladder.n_levels) + self.grid.shape
        return (n_sub,) + self.grid.shape

    def backward_step(self, v_next: np.ndarray):
        """One explicit step plus obstacle projection.

        Returns (v_current, policy dict, residual stats).
        """
        dt = self.grid.dt
        v_pde = np.empty_like(v_next)
        for i in range(self.n_cfg):
            h = self.hamiltonian_continuous(v_next[i])
            if self.exec_terms[i]:
                h = h + self.execution_term(i, v_next)
            v_pde[i] = v_next[i] + dt * h

        v_cur = v_pde.copy()
        n_sub = self.subcap.size
        cont = np.ones((n_sub,) + self.grid.shape, dtype=bool)
        lev = np.full((n_sub,) + self.grid.shape, -1, dtype=np.int8)
        siz = np.full(self._size_table_shape(n_sub), -1, dtype=np.int8)
        mv_cache: dict[int, np.ndarray] = {}
        # descending pending-count order: submissions point to configs with
        # strictly more orders, already final when we reach their source
        order = sorted(range(n_sub),
                       key=lambda a: -self.grid.configs[self.subcap[a]].total_count)
        for a in order:
            i = int(self.subcap[a])
            if not self.submit_cands[i]:
                continue  # no admissible submission: node follows the plain PDE
            mv, ml, ms = self.intervention_max(i, v_cur)
            mv_cache[a] = mv
            eps = self.opt.exercise_tol_rel * (1.0 + np.abs(v_cur[i]))
            exercise = mv - v_cur[i] > eps
            cont[a] = ~exercise
            lev[a][exercise] = ml[exercise]
            if self.opt.fee_mode == "random":
                siz[a][:, exercise] = ms[:, exercise]
            else:
                siz[a][exercise] = ms[exercise]
            np.maximum(v_cur[i], mv, out=v_cur[i])

        # scheme-consistent residual: |min(-v_t - H, v - Mv)| with v_t by
        # backward difference; zero up to roundoff by construction
        pde_res = (v_cur - v_pde) / dt
        res = np.abs(pde_res)
        for a, mv in mv_cache.items():
            i = int(self.subcap[a])
            res[i] = np.abs(np.minimum(pde_res[i], v_cur[i] - mv))
        interior = res[:, 1:-1, 1:-1, 1:-1]
        stats = dict(max=float(interior.max()), mean=float(interior.mean()))

        env_ratio = np.abs(v_cur) / self.envelope
        if float(env_ratio.max()) > self.opt.growth_cap * self._c2_terminal:
            raise StabilityViolation(
                f"value escaped the quadratic growth envelope "
                f"(ratio {env_ratio.max():.3e} vs cap "
                f"{self.opt.growth_cap * self._c2_terminal:.3e})")

        policy = dict(continuation=cont, level=lev, size_idx=siz)
        return v_cur, policy, stats

    def terminal_values(self) -> np.ndarray:
        g_slice = self.Q * self.S - self.market.terminal_penalty * self.Q ** 2
        return np.broadcast_to(g_slice, (self.n_cfg,) + self.grid.shape).copy()

    def solve(self) -> SolveResult:
        g = self.grid
        t0 = time.perf_counter()
        n_steps = g.t_steps
        store_v = self.opt.store_value_every
        if store_v is None:
            store_v = max(1, n_steps // 10)
        store_nu = self.opt.store_nu_every
        if store_nu is None:
            store_nu = max(1, n_steps // 40)
        v_store_idx = sorted(set(range(0, n_steps + 1, store_v)) | {0, n_steps})
        nu_store_idx = sorted(set(range(0, n_steps + 1, store_nu)) | {0, n_steps})

        v = self.terminal_values()
        stored_v = {n_steps: v.copy()}
        n_sub = self.subcap.size
        cont = np.ones((n_steps, n_sub) + g.shape, dtype=bool)
        lev = np.full((n_steps, n_sub) + g.shape, -1, dtype=np.int8)
        siz = np.full((n_steps,) + self._size_table_shape(n_sub), -1, dtype=np.int8)
        nu_stored = {}
        if n_steps in nu_store_idx:
            nu_stored[n_steps] = self._nu_all(v)
        res_max = np.zeros(n_steps)
        res_mean = np.zeros(n_steps)

        for step in range(n_steps - 1, -1, -1):
            v, policy, stats = self.backward_step(v)
            cont[step] = policy["continuation"]
            lev[step] = policy["level"]
            siz[step] = policy["size_idx"]
            res_max[step] = stats["max"]
            res_mean[step] = stats["mean"]
            if step in v_store_idx:
                stored_v[step] = v.copy()
            if step in nu_store_idx:
                nu_stored[step] = self._nu_all(v)

        t_idx = np.array(sorted(stored_v), dtype=int)
        values = np.stack([stored_v[i] for i in t_idx])
        nu_idx = np.array(sorted(nu_stored), dtype=int)
        nu_star = np.stack([nu_stored[i] for i in nu_idx])

        field = ValueField(grid=g, t_indices=t_idx, values=values)
        policy = PolicyTables(
            grid=g, subcap_config_indices=self.subcap,
            continuation=cont, impulse_level=lev, impulse_size_idx=siz,
            nu_t_indices=nu_idx, nu_star=nu_star, fee_mode=self.opt.fee_mode)
        diag = dict(
            runtime_s=time.perf_counter() - t0,
            clamped_stencil_nodes=self.clamped_nodes,
            extrapolated_stencil_nodes=self.extrapolated_nodes,
            growth_constant=float((np.abs(v) / self.envelope).max()),
            nu_max=self.opt.nu_max,
            fee_mode=self.opt.fee_mode,
        )
        return SolveResult(value=field, policy=policy,
                           residual_max=res_max, residual_mean=res_mean,
                           diagnostics=diag)

    def _nu_all(self, v_all: np.ndarray) -> np.ndarray:
        out = np.empty((self.n_cfg,) + self.grid.shape, dtype=self.opt.nu_dtype)
        for i in range(self.n_cfg):
            out[i] = self.nu_star(v_all[i])
        return out


def solve(problem: ProblemSpec, grid: GridSpec,
          options: SolverOptions | None = None) -> SolveResult:
    return QviSolver(problem, grid, options).solve()


def qvi_residual(field: ValueField, problem: ProblemSpec,
                 options: SolverOptions | None = None) -> dict:
    """Pointwise QVI residual statistics recomputed from a fully stored field.

    For configurations below capacity the residual is
    |min(-v_t - sup H, v - Mv)|; at capacity it is |-v_t - sup H|.
    """
    if not field.stores_every_step:
        raise ValueError("qvi_residual needs a field stored at every time step")
    g = field.grid
    solver = QviSolver(problem, g, options)
    dt = g.dt
    maxima, means = [], []
    all_interior = []
    for step in range(g.t_steps):
        v_cur = field.at(step)
        v_next = field.at(step + 1)
        res = np.empty_like(v_cur)
        for i in range(solver.n_cfg):
            h = solver.hamiltonian_continuous(v_next[i])
            if solver.exec_terms[i]:
                h = h + solver.execution_term(i, v_next)
            res[i] = -(v_next[i] - v_cur[i]) / dt - h
        for a in range(solver.subcap.size):
            i = int(solver.subcap[a])
            if not solver.submit_cands[i]:
                continue
            mv, _, _ = solver.intervention_max(i, v_cur)
            res[i] = np.minimum(res[i], v_cur[i] - mv)
        interior = np.abs(res[:, 1:-1, 1:-1, 1:-1])
        maxima.append(float(interior.max()))
        means.append(float(interior.mean()))
        all_interior.append(interior.ravel())
    allr = np.concatenate(all_interior) if all_interior else np.zeros(1)
    return dict(max=float(np.max(maxima) if maxima else 0.0),
                mean=float(np.mean(means) if means else 0.0),
                q99=float(np.quantile(allr, 0.99)),
                per_step_max=np.array(maxima))


def obstacle_violation(field: ValueField, problem: ProblemSpec,
                       options: SolverOptions | None = None) -> float:
    """Largest violation of v >= Mv - 1e-8*scale over stored sub-capacity
    slices, as a multiple of the scale (<= 1e-8 means none)."""
    g = field.grid
    solver = QviSolver(problem, g, options)
    worst = 0.0
    for pos in range(field.t_indices.size):
        if field.t_indices[pos] == g.t_steps:
            continue
        v = field.values[pos]
        for a in range(solver.subcap.size):
            i = int(solver.subcap[a])
            if not solver.submit_cands[i]:
                continue
            mv, _, _ = solver.intervention_max(i, v)
            scale = 1.0 + np.abs(v[i])
            worst = max(worst, float(((mv - v[i]) / scale).max()))
    return worst
