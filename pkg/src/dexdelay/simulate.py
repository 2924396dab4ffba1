"""Monte Carlo policy evaluation.

Simulates the (s, z, q) dynamics under solved policy tables with Euler steps,
per-level execution clocks thinned step by step, and a counter-based RNG with
a fixed draw layout, so every artifact is independent of threading.

Delay mechanics: at each step a pending level executes with probability
1 - exp(-rate*dt); on execution the same uniform is reused through the
conditional inverse CDF, so realized delays follow the exact exponential law.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import config_after_execute, config_after_submit
from .errors import CapacityExceeded, VolumeCapExceeded
from .market import MarketParams, psi, swap_cashflow
from .solver import PolicyTables, SolveResult


@dataclass(frozen=True)
class SimConfig:
    """Path count, time resolution, seed, and policy source.

    randomize_level=True gives the random-fee baseline: submission times and
    sizes follow the supplied tables, but the level is replaced by an
    independent uniform draw at each submission.
    """

    n_paths: int = 10_000
    n_steps: int | None = None  # None: match the solver grid
    seed: int = 0
    randomize_level: bool = False
    record: bool = False  # keep per-path trajectories and order events

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.n_steps is not None and self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass
class SimRecord:
    """One recorded path: trajectories at step boundaries plus order events."""

    times: np.ndarray
    s: np.ndarray
    z: np.ndarray
    q: np.ndarray
    cash: np.ndarray
    orders: list  # dicts: submit_time, level, size, execute_time (None if open)
    objective: float

    def as_dict(self) -> dict:
        return dict(times=self.times.tolist(), s=self.s.tolist(),
                    z=self.z.tolist(), q=self.q.tolist(),
                    cash=self.cash.tolist(), orders=self.orders,
                    objective=self.objective)


@dataclass
class SimResult:
    """Aggregate output of one Monte Carlo run."""

    j_paths: np.ndarray  # realized objective per path
    running: np.ndarray  # integral of the running reward f
    execution: np.ndarray  # sum of DEX execution cash flows
    terminal: np.ndarray  # terminal reward g
    delays: list  # per level, realized delays of executed orders
    n_submitted: int
    n_executed: int
    grid_escapes: int  # clamped state lookups outside the grid
    seed: int
    records: list = field(default_factory=list)  # SimRecord if requested

    @property
    def mean(self) -> float:
        return float(self.j_paths.mean())

    @property
    def std_error(self) -> float:
        n = self.j_paths.size
        return float(self.j_paths.std(ddof=1) / np.sqrt(n)) if n > 1 else np.inf


class _Tables:
    """Integer transition tables so the path loop never touches float keys."""

    def __init__(self, policy: PolicyTables, ladder, max_pending, volume_bound,
                 pending_cap):
        g = policy.grid
        self.n_cfg = len(g.configs)
        n_lev = ladder.n_levels
        n_sizes = len(g.volume_grid)
        idx = {c.key(): i for i, c in enumerate(g.configs)}
        self.subpos = np.full(self.n_cfg, -1, dtype=int)
        for pos, i in enumerate(policy.subcap_config_indices):
            self.subpos[i] = pos
        self.counts = np.array([c.counts for c in g.configs], dtype=int)
        self.submit_to = np.full((self.n_cfg, n_lev, n_sizes), -1, dtype=int)
        for i, cfg in enumerate(g.configs):
            if cfg.total_count >= max_pending:
                continue
            for lv in range(n_lev):
                for sj, size in enumerate(g.volume_grid):
                    try:
                        tgt = config_after_submit(
                            cfg, lv, size, max_pending=max_pending,
                            volume_bound=volume_bound, pending_cap=pending_cap)
                    except (CapacityExceeded, VolumeCapExceeded):
                        continue
                    j = idx.get(tgt.key())
                    if j is not None:
                        self.submit_to[i, lv, sj] = j
        self.exec_to = np.full((self.n_cfg, n_lev), -1, dtype=int)
        self.exec_vol = np.zeros((self.n_cfg, n_lev))
        for i, cfg in enumerate(g.configs):
            for lv in range(n_lev):
                if cfg.counts[lv] == 0:
                    continue
                tgt, vol = config_after_execute(cfg, lv)
                self.exec_to[i, lv] = idx[tgt.key()]
                self.exec_vol[i, lv] = vol


def _nearest_index(x, axis):
    d = axis[1] - axis[0]
    i = np.rint((x - axis[0]) / d).astype(int)
    escapes = int(np.sum((i < 0) | (i >= axis.size)))
    return np.clip(i, 0, axis.size - 1), escapes


def _trilinear(table, cfg, s, z, q, axes):
    """Multilinear lookup of table[cfg, :, :, :] at (s, z, q), clamped."""
    idx, wts = [], []
    for x, ax in zip((s, z, q), axes):
        pos = (np.clip(x, ax[0], ax[-1]) - ax[0]) / (ax[1] - ax[0])
        i0 = np.clip(np.floor(pos).astype(int), 0, ax.size - 2)
        idx.append(i0)
        wts.append(pos - i0)
    out = np.zeros(cfg.shape)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                w = (np.abs(1 - a - wts[0]) * np.abs(1 - b - wts[1])
                     * np.abs(1 - c - wts[2]))
                out += w * table[cfg, idx[0] + a, idx[1] + b, idx[2] + c]
    return out


def simulate(result: SolveResult, params: MarketParams, ladder, *,
             max_pending: int, volume_bound: float, pending_cap: float,
             sim: SimConfig | None = None) -> SimResult:
    """Run paths from (s0, z0, q=0, empty book) under the solved policy.

    Per step: submissions are checked at the step boundary from the policy
    tables; pending levels execute via thinning; the CEX rate comes from the
    nu* table (multilinear in space, nearest stored slice in time); then the
    prices diffuse. The objective accumulates f by left-point quadrature.
    """
    sim = sim or SimConfig()
    policy = result.policy
    g = policy.grid
    n_steps = sim.n_steps if sim.n_steps is not None else g.t_steps
    dt = g.horizon / n_steps
    if dt > g.dt * (1 + 1e-9):
        raise ValueError("simulation step must not exceed the PDE step")
    n_lev = ladder.n_levels
    if max(ladder.rates) * dt > 0.05:
        raise ValueError("rate*dt exceeds 0.05; refine the simulation step")
    if sim.randomize_level and policy.fee_mode == "random" and n_lev < 1:
        raise ValueError("randomized baseline needs at least one level")
    if not sim.randomize_level and policy.fee_mode == "random":
        raise ValueError("random-mode tables carry no level choice; "
                         "set randomize_level=True")
    n = sim.n_paths
    tab = _Tables(policy, ladder, max_pending, volume_bound, pending_cap)
    sizes = np.asarray(g.volume_grid)
    rates = np.asarray(ladder.rates)
    fees = np.asarray(ladder.fees)
    p_exec = -np.expm1(-rates * dt)
    axes = (g.s_axis, g.z_axis, g.q_axis)

    # fixed draw layout: everything a path might need is drawn up front
    gen = np.random.Generator(np.random.Philox(sim.seed))
    normals = gen.standard_normal((n_steps, 2, n))
    u_exec = gen.random((n_steps, n_lev, n))
    u_level = gen.random((n_steps, n))

    s = np.full(n, params.s0)
    z = np.full(n, params.z0)
    q = np.zeros(n)
    cfg = np.zeros(n, dtype=int)
    block_start = np.full((n_lev, n), np.nan)
    j_run = np.zeros(n)
    j_exec = np.zeros(n)
    cash = np.zeros(n)
    delays = [[] for _ in range(n_lev)]
    n_submitted = 0
    n_executed = 0
    escapes = 0
    price_floor = 1e-6 * min(params.s0, params.z0)
    per_level_sizes = policy.fee_mode == "random"
    sq_dt = np.sqrt(dt)

    if sim.record:
        traj = {k: np.zeros((n_steps + 1, n)) for k in ("s", "z", "q", "cash")}
        orders = [[] for _ in range(n)]
        open_order = [{} for _ in range(n)]

    def snapshot(st):
        traj["s"][st], traj["z"][st] = s, z
        traj["q"][st], traj["cash"][st] = q, cash

    if sim.record:
        snapshot(0)

    for st in range(n_steps):
        t = st * dt
        st_pol = min(int(round(t / g.dt)), g.t_steps - 1)
        i_s, e1 = _nearest_index(s, g.s_axis)
        i_z, e2 = _nearest_index(z, g.z_axis)
        i_q, e3 = _nearest_index(q, g.q_axis)
        escapes += e1 + e2 + e3

        # submissions at the step boundary
        sub = tab.subpos[cfg]
        el = np.nonzero(sub >= 0)[0]
        if el.size:
            cont = policy.continuation[st_pol, sub[el], i_s[el], i_z[el], i_q[el]]
            pe = el[~cont]
            if pe.size:
                if sim.randomize_level:
                    lv = np.minimum((u_level[st, pe] * n_lev).astype(int),
                                    n_lev - 1)
                    if per_level_sizes:
                        sz = policy.impulse_size_idx[
                            st_pol, sub[pe], lv, i_s[pe], i_z[pe], i_q[pe]]
                    else:
                        sz = policy.impulse_size_idx[
                            st_pol, sub[pe], i_s[pe], i_z[pe], i_q[pe]]
                else:
                    lv = policy.impulse_level[
                        st_pol, sub[pe], i_s[pe], i_z[pe], i_q[pe]]
                    sz = policy.impulse_size_idx[
                        st_pol, sub[pe], i_s[pe], i_z[pe], i_q[pe]]
                ok = (lv >= 0) & (sz >= 0)
                pe, lv, sz = pe[ok], lv[ok].astype(int), sz[ok].astype(int)
                tgt = tab.submit_to[cfg[pe], lv, sz]
                ok = tgt >= 0
                pe, lv, sz, tgt = pe[ok], lv[ok], sz[ok], tgt[ok]
                newly = tab.counts[cfg[pe], lv] == 0
                block_start[lv[newly], pe[newly]] = t
                cfg[pe] = tgt
                n_submitted += pe.size
                if sim.record:
                    for p, l, j in zip(pe, lv, sz):
                        open_order[p] = dict(submit_time=t, level=int(l),
                                             size=float(sizes[j]),
                                             execute_time=None)

        # executions: one thinning uniform per level per step
        for lv in range(n_lev):
            pend = tab.counts[cfg, lv] > 0
            if not pend.any():
                continue
            u = u_exec[st, lv]
            fire = pend & (u < p_exec[lv])
            if not fire.any():
                continue
            pe = np.nonzero(fire)[0]
            tau = -np.log1p(-u[pe]) / rates[lv]  # in [0, dt) given u < p
            delays[lv].append(t + tau - block_start[lv, pe])
            block_start[lv, pe] = np.nan
            vol = tab.exec_vol[cfg[pe], lv]
            flow = swap_cashflow(vol, z[pe], params.depth) - fees[lv]
            j_exec[pe] += flow
            cash[pe] += flow
            z[pe] = np.maximum(z[pe] + psi(z[pe], params.depth) * vol,
                               price_floor)
            q[pe] += vol
            cfg[pe] = tab.exec_to[cfg[pe], lv]
            n_executed += pe.size
            if sim.record:
                for p, d in zip(pe, tau):
                    if open_order[p]:
                        open_order[p]["execute_time"] = float(t + d)
                        orders[p].append(open_order[p])
                        open_order[p] = {}

        # continuous control and dynamics, left-point Euler
        nu = _trilinear(policy.nu_slice(st_pol), cfg, s, z, q, axes)
        cex_flow = -nu * (s + params.temp_impact * nu) * dt
        j_run += cex_flow - params.running_penalty * q ** 2 * dt
        cash += cex_flow
        z = z + params.kappa * (s - z) * dt + params.sigma_z * sq_dt * normals[st, 1]
        s = s + params.sigma_s * sq_dt * normals[st, 0]
        s = np.maximum(s, price_floor)
        z = np.maximum(z, price_floor)
        q = q + nu * dt
        if sim.record:
            snapshot(st + 1)

    j_term = q * s - params.terminal_penalty * q ** 2
    j_paths = j_run + j_exec + j_term
    records = []
    if sim.record:
        times = np.arange(n_steps + 1) * dt
        for p in range(n):
            ords = orders[p] + ([open_order[p]] if open_order[p] else [])
            records.append(SimRecord(
                times=times, s=traj["s"][:, p].copy(), z=traj["z"][:, p].copy(),
                q=traj["q"][:, p].copy(), cash=traj["cash"][:, p].copy(),
                orders=ords, objective=float(j_paths[p])))
    return SimResult(
        j_paths=j_paths, running=j_run, execution=j_exec, terminal=j_term,
        delays=[np.concatenate(d) if d else np.empty(0) for d in delays],
        n_submitted=n_submitted, n_executed=n_executed,
        grid_escapes=escapes, seed=sim.seed, records=records)


def simulate_path(result: SolveResult, params: MarketParams, ladder, *,
                  max_pending: int, volume_bound: float, pending_cap: float,
                  sim: SimConfig | None = None) -> SimRecord:
    """Single recorded path; see simulate."""
    base = sim or SimConfig()
    one = SimConfig(n_paths=1, n_steps=base.n_steps, seed=base.seed,
                    randomize_level=base.randomize_level, record=True)
    out = simulate(result, params, ladder, max_pending=max_pending,
                   volume_bound=volume_bound, pending_cap=pending_cap, sim=one)
    return out.records[0]


def evaluate_policy(result: SolveResult, params: MarketParams, ladder, *,
                    max_pending: int, volume_bound: float, pending_cap: float,
                    sim: SimConfig | None = None) -> tuple[float, float]:
    """Sample mean and standard error of the realized objective."""
    sim = sim or SimConfig()
    if sim.n_paths < 100:
        raise ValueError("evaluate_policy needs at least 100 paths")
    out = simulate(result, params, ladder, max_pending=max_pending,
                   volume_bound=volume_bound, pending_cap=pending_cap, sim=sim)
    return out.mean, out.std_error


def sample_delays(rate: float, n_samples: int, dt: float, seed: int = 0,
                  max_steps: int | None = None) -> np.ndarray:
    """Delays produced by the simulator's per-step thinning, in isolation.

    Uses the same reuse of the thinning uniform as the path engine; with no
    horizon cutoff the output law is exactly Exponential(rate).
    """
    if rate <= 0 or dt <= 0:
        raise ValueError("rate and dt must be positive")
    gen = np.random.Generator(np.random.Philox(seed))
    p = -np.expm1(-rate * dt)
    if max_steps is None:
        max_steps = int(np.ceil(40.0 / (rate * dt)))
    out = np.full(n_samples, np.nan)
    alive = np.ones(n_samples, dtype=bool)
    for k in range(max_steps):
        u = gen.random(n_samples)
        fire = alive & (u < p)
        if fire.any():
            out[fire] = k * dt - np.log1p(-u[fire]) / rate
            alive &= ~fire
        if not alive.any():
            break
    return out[~np.isnan(out)]


@dataclass
class Comparison:
    """Paired comparison of two policies on common random numbers."""

    mean_a: float
    mean_b: float
    diff_mean: float
    diff_se: float
    t_stat: float
    diff_quantiles: dict = field(default_factory=dict)

    @property
    def significant_95(self) -> bool:
        return self.t_stat > 1.6449  # one-sided normal quantile

    def as_dict(self) -> dict:
        return dict(mean_a=self.mean_a, mean_b=self.mean_b,
                    diff_mean=self.diff_mean, diff_se=self.diff_se,
                    t_stat=self.t_stat, significant_95=self.significant_95,
                    diff_quantiles=self.diff_quantiles)


def compare(result_a: SimResult, result_b: SimResult) -> Comparison:
    """One-sided paired test that policy A outperforms policy B; both runs
    must use the same seed (common random numbers)."""
    if result_a.seed != result_b.seed:
        raise ValueError("paired comparison needs a common seed")
    if result_a.j_paths.size != result_b.j_paths.size:
        raise ValueError("paired comparison needs equal path counts")
    d = result_a.j_paths - result_b.j_paths
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else np.inf
    qs = {f"p{p}": float(np.quantile(d, p / 100)) for p in (5, 25, 50, 75, 95)}
    return Comparison(
        mean_a=float(result_a.j_paths.mean()),
        mean_b=float(result_b.j_paths.mean()),
        diff_mean=float(d.mean()), diff_se=se,
        t_stat=float(d.mean() / se) if 0 < se < np.inf else np.inf,
        diff_quantiles=qs)
