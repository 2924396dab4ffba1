"""Post-processing of solved policies: exercise/continuation region maps,
priority-fee maps, ladder-size value sweeps, and smooth-fit diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .control import PriorityLadder, ProblemSpec, enumerate_configs
from .errors import OffGrid
from .market import build_problem
from .solver import (
    GridSpec,
    PolicyTables,
    SolveResult,
    SolverOptions,
    ValueField,
    solve,
)


@dataclass
class RegionMap:
    """Exercise/continuation labels over the (s, z) plane at fixed (t, q)."""

    t_index: int
    q_index: int
    s_axis: np.ndarray
    z_axis: np.ndarray
    continuation: np.ndarray  # bool (ns, nz)
    level: np.ndarray  # int8, -1 where continuation
    size: np.ndarray  # executed size, 0 where continuation

    def label(self, i_s: int, i_z: int) -> str:
        if self.continuation[i_s, i_z]:
            return "CONTINUE"
        return (f"EXERCISE(level={int(self.level[i_s, i_z])},"
                f" size={self.size[i_s, i_z]:g})")

    @property
    def exercise_measure(self) -> int:
        return int((~self.continuation).sum())


def _empty_config_position(policy: PolicyTables) -> int:
    for pos, i in enumerate(policy.subcap_config_indices):
        if policy.grid.configs[i].is_empty():
            return pos
    raise ValueError("policy tables carry no empty-book configuration")


def _policy_time_index(policy: PolicyTables, t: float) -> int:
    g = policy.grid
    idx = g.t_index_of(t)
    if idx >= g.t_steps:  # policy not defined at the terminal instant
        raise OffGrid(f"no policy at the terminal time t={t}")
    return idx


def extract_region(policy: PolicyTables, t: float, q: float) -> RegionMap:
    """Region map for the empty pending book at grid time t and inventory q."""
    if policy.fee_mode != "optimal":
        raise ValueError("region extraction needs optimal-mode tables")
    g = policy.grid
    ti = _policy_time_index(policy, t)
    qi = int(np.argmin(np.abs(g.q_axis - q)))
    if abs(g.q_axis[qi] - q) > 1e-9 * (1 + abs(q)):
        raise OffGrid(f"q={q} is not a grid node")
    pos = _empty_config_position(policy)
    cont = policy.continuation[ti, pos, :, :, qi]
    lev = policy.impulse_level[ti, pos, :, :, qi]
    siz_idx = policy.impulse_size_idx[ti, pos, :, :, qi]
    sizes = np.asarray(g.volume_grid)
    size = np.where(siz_idx >= 0, sizes[np.clip(siz_idx, 0, sizes.size - 1)], 0.0)
    return RegionMap(t_index=ti, q_index=qi, s_axis=g.s_axis, z_axis=g.z_axis,
                     continuation=cont.copy(), level=lev.copy(), size=size)


def fee_map(policy: PolicyTables, t: float, q: float) -> np.ndarray:
    """Chosen priority level over (s, z) at (t, q); -1 where continuation."""
    return extract_region(policy, t, q).level


def ladder_recipe(n_levels: int) -> PriorityLadder:
    """Nested fee/rate menu: fees start at 100 with step 200, execution
    intensities start at 2 with step 0.5."""
    if n_levels < 1:
        raise ValueError("need at least one level")
    return PriorityLadder(
        fees=tuple(100.0 + 200.0 * i for i in range(n_levels)),
        rates=tuple(2.0 + 0.5 * i for i in range(n_levels)))


def value_norm_sweep(problem: ProblemSpec, grid: GridSpec, n_list,
                     options: SolverOptions | None = None) -> list[dict]:
    """Frobenius norm of v(0, ·, empty book) for nested ladder prefixes.

    Each entry solves the problem with the recipe ladder truncated to N
    levels on the same axes; the sequence must be non-decreasing in N
    because the admissible sets nest.
    """
    market = problem.extras["market"]
    out = []
    for n in n_list:
        ladder = ladder_recipe(int(n))
        prob_n = build_problem(market, ladder,
                               max_pending=problem.max_pending,
                               volume_bound=problem.volume_bound,
                               pending_cap=problem.pending_cap)
        configs = enumerate_configs(ladder, problem.max_pending,
                                    grid.volume_grid,
                                    volume_bound=problem.volume_bound,
                                    pending_cap=problem.pending_cap)
        grid_n = GridSpec(t_steps=grid.t_steps, s_axis=grid.s_axis,
                          z_axis=grid.z_axis, q_axis=grid.q_axis,
                          configs=configs, volume_grid=grid.volume_grid,
                          horizon=grid.horizon)
        res = solve(prob_n, grid_n, options)
        empty = next(i for i, c in enumerate(configs) if c.is_empty())
        v0 = res.value.at(0)[empty]
        out.append(dict(n_levels=int(n), norm=float(np.linalg.norm(v0)),
                        v0_center=float(v0[v0.shape[0] // 2,
                                           v0.shape[1] // 2,
                                           v0.shape[2] // 2])))
    return out


def smooth_fit_diagnostic(value: ValueField, policy: PolicyTables,
                          t: float) -> dict:
    """Jump in the discrete gradient across the exercise boundary.

    For every pair of adjacent cells with different labels, compares the
    one-sided derivative estimates on either side of the face along that
    axis. Informational: a first-order scheme makes the jump O(grid step).
    """
    g = policy.grid
    ti = _policy_time_index(policy, t)
    try:
        v_all = value.at(ti)
    except KeyError as exc:
        raise OffGrid(f"value not stored at time index {ti}") from exc
    pos = _empty_config_position(policy)
    cfg_idx = int(policy.subcap_config_indices[pos])
    v = v_all[cfg_idx]
    cont = policy.continuation[ti, pos]
    steps = (g.s_axis[1] - g.s_axis[0], g.z_axis[1] - g.z_axis[0],
             g.q_axis[1] - g.q_axis[0])
    jumps = []
    excluded = 0
    for axis, h in enumerate(steps):
        lab = np.moveaxis(cont, axis, 0)
        val = np.moveaxis(v, axis, 0)
        n = lab.shape[0]
        boundary = lab[:-1] != lab[1:]  # face between slices i and i+1
        for i in range(n - 1):
            if not boundary[i].any():
                continue
            if i == 0 or i + 2 >= n:
                excluded += int(boundary[i].sum())
                continue
            left = (val[i] - val[i - 1]) / h
            right = (val[i + 2] - val[i + 1]) / h
            jumps.append(np.abs(right - left)[boundary[i]])
    if not jumps:
        return dict(n_faces=0, excluded=excluded, max=0.0, mean=0.0)
    allj = np.concatenate(jumps)
    return dict(n_faces=int(allj.size), excluded=excluded,
                max=float(allj.max()), mean=float(allj.mean()))


def nu_sensitivity(policy: PolicyTables, t: float) -> dict:
    """Range of nu* over s versus over q at (z = z-grid midpoint, empty book);
    reports the ratio without asserting a threshold."""
    g = policy.grid
    ti = _policy_time_index(policy, t)
    pos = _empty_config_position(policy)
    cfg_idx = int(policy.subcap_config_indices[pos])
    nu = policy.nu_slice(ti)[cfg_idx][:, g.z_axis.size // 2, :]
    range_s = float(np.ptp(nu, axis=0).mean())  # sweep s at fixed q
    range_q = float(np.ptp(nu, axis=1).mean())  # sweep q at fixed s
    return dict(range_over_s=range_s, range_over_q=range_q,
                ratio_q_over_s=range_q / range_s if range_s > 0 else np.inf)


def write_region_csv(region: RegionMap, path) -> None:
    """One row per (s, z) cell: coordinates, label, level, size."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "z", "label", "level", "size"])
        for i, s in enumerate(region.s_axis):
            for j, z in enumerate(region.z_axis):
                cont = bool(region.continuation[i, j])
                w.writerow([f"{s:.10g}", f"{z:.10g}",
                            "CONTINUE" if cont else "EXERCISE",
                            -1 if cont else int(region.level[i, j]),
                            0.0 if cont else float(region.size[i, j])])


def write_region_png(region: RegionMap, path, *, color_by: str = "size",
                     title: str = "") -> None:
    """Heatmap of the region: continuation in neutral, exercise colored by
    chosen size (sign) or level."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if color_by == "size":
        data = np.where(region.continuation, np.nan, region.size)
        cmap, label = "coolwarm", "chosen size"
    elif color_by == "level":
        data = np.where(region.continuation, np.nan, region.level.astype(float))
        cmap, label = "viridis", "chosen level"
    else:
        raise ValueError("color_by must be 'size' or 'level'")
    fig, ax = plt.subplots(figsize=(5, 4))
    extent = [region.z_axis[0], region.z_axis[-1],
              region.s_axis[0], region.s_axis[-1]]
    im = ax.imshow(data, origin="lower", aspect="auto", extent=extent,
                   cmap=cmap)
    ax.set_xlabel("pool price z")
    ax.set_ylabel("CEX price s")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label=label)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
