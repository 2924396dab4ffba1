"""Generic mixed-control problem data: fee ladders, pending-order configurations,
and the abstract problem description consumed by the solver.

A pending-order configuration tracks, per priority level, how many orders are
waiting and their aggregated signed volume. Two orders of +1 and -1 at the same
level net to zero pending volume but still count as two pending orders.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CapacityExceeded,
    NoPendingAtLevel,
    VolumeCapExceeded,
)

# volumes are sums of grid values; keys are rounded so equal sums compare equal
_VOL_DECIMALS = 9


def _vkey(x: float) -> float:
    return round(float(x), _VOL_DECIMALS)


@dataclass(frozen=True)
class PriorityLadder:
    """Priority-fee menu: fee paid and execution intensity per level.

    Higher levels cost more and execute faster (larger intensity means a
    shorter expected delay 1/rate).
    """

    fees: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        fees = tuple(float(f) for f in self.fees)
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "fees", fees)
        object.__setattr__(self, "rates", rates)
        if len(fees) < 1 or len(fees) != len(rates):
            raise ValueError("ladder needs matching, non-empty fee and rate vectors")
        if any(f <= 0 for f in fees) or any(r <= 0 for r in rates):
            raise ValueError("fees and rates must be strictly positive")
        if any(b <= a for a, b in zip(fees, fees[1:])):
            raise ValueError("fees must be strictly increasing in level")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("rates must be strictly increasing in level")

    @property
    def n_levels(self) -> int:
        return len(self.fees)

    def prefix(self, n: int) -> "PriorityLadder":
        return PriorityLadder(self.fees[:n], self.rates[:n])


@dataclass(frozen=True)
class PendingConfig:
    """Per-level pending-order counts and aggregated pending volumes."""

    counts: tuple[int, ...]
    volumes: tuple[float, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        volumes = tuple(float(v) for v in self.volumes)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "volumes", volumes)
        if len(counts) != len(volumes):
            raise ValueError("counts and volumes must have equal length")
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        for c, v in zip(counts, volumes):
            if c == 0 and v != 0.0:
                raise ValueError("zero pending orders at a level implies zero volume")

    @classmethod
    def empty(cls, n_levels: int) -> "PendingConfig":
        return cls((0,) * n_levels, (0.0,) * n_levels)

    @property
    def total_count(self) -> int:
        return sum(self.counts)

    @property
    def total_abs_volume(self) -> float:
        return sum(abs(v) for v in self.volumes)

    def key(self) -> tuple:
        return (self.counts, tuple(_vkey(v) for v in self.volumes))

    def is_empty(self) -> bool:
        return self.total_count == 0


def validate_config(cfg: PendingConfig, max_pending: int, volume_bound: float,
                    pending_cap: float) -> None:
    """Check the capacity invariants a configuration must satisfy."""
    if cfg.total_count > max_pending:
        raise CapacityExceeded(
            f"{cfg.total_count} pending orders exceed capacity {max_pending}")
    if cfg.total_abs_volume > pending_cap + 1e-12:
        raise VolumeCapExceeded(
            f"pending volume {cfg.total_abs_volume} exceeds cap {pending_cap}")
    for c, v in zip(cfg.counts, cfg.volumes):
        if abs(v) > c * volume_bound + 1e-12:
            raise VolumeCapExceeded(
                f"level volume {v} not reachable with {c} orders of size <= {volume_bound}")


def config_after_submit(cfg: PendingConfig, level: int, size: float, *,
                        max_pending: int, volume_bound: float,
                        pending_cap: float) -> PendingConfig:
    """Configuration after submitting one order of `size` at `level`."""
    if cfg.total_count >= max_pending:
        raise CapacityExceeded(f"already {cfg.total_count} of {max_pending} pending")
    if abs(size) > volume_bound + 1e-12:
        raise VolumeCapExceeded(f"|size|={abs(size)} exceeds per-order bound {volume_bound}")
    if cfg.total_abs_volume + abs(size) > pending_cap + 1e-12:
        raise VolumeCapExceeded(
            f"pending volume {cfg.total_abs_volume + abs(size)} exceeds cap {pending_cap}")
    counts = list(cfg.counts)
    volumes = list(cfg.volumes)
    counts[level] += 1
    volumes[level] = _vkey(volumes[level] + size)
    return PendingConfig(tuple(counts), tuple(volumes))


def config_after_execute(cfg: PendingConfig, level: int) -> tuple[PendingConfig, float]:
    """Execute the whole pending block at `level`; returns the new configuration
    and the aggregate executed volume. All orders at a level execute at once."""
    if cfg.counts[level] == 0:
        raise NoPendingAtLevel(f"no pending orders at level {level}")
    executed = cfg.volumes[level]
    counts = list(cfg.counts)
    volumes = list(cfg.volumes)
    counts[level] = 0
    volumes[level] = 0.0
    return PendingConfig(tuple(counts), tuple(volumes)), executed


def _aggregate_sums(volume_grid: Sequence[float], count: int) -> list[float]:
    """Distinct sums of exactly `count` grid values (with repetition)."""
    if count == 0:
        return [0.0]
    sums = {}
    for combo in itertools.combinations_with_replacement(volume_grid, count):
        s = _vkey(sum(combo))
        sums[s] = s
    return sorted(sums.values())


def enumerate_configs(ladder: PriorityLadder, max_pending: int,
                      volume_grid: Sequence[float], *,
                      volume_bound: float | None = None,
                      pending_cap: float = np.inf) -> list[PendingConfig]:
    """All pending-order configurations reachable with at most `max_pending`
    orders whose sizes come from `volume_grid`, deduplicated by aggregate.

    The grid must be finite, sorted, symmetric about zero and exclude zero.
    """
    n = ladder.n_levels
    if max_pending < 0:
        raise ValueError("max_pending must be >= 0")
    grid = [float(g) for g in volume_grid]
    if max_pending >= 1:
        if not grid:
            raise ValueError("volume grid must be non-empty when orders are allowed")
        if grid != sorted(grid):
            raise ValueError("volume grid must be sorted")
        if 0.0 in grid:
            raise ValueError("volume grid must exclude zero")
        neg = sorted(-g for g in grid if g < 0)
        pos = sorted(g for g in grid if g > 0)
        if neg != pos:
            raise ValueError("volume grid must be symmetric about zero")
        if volume_bound is not None and max(abs(g) for g in grid) > volume_bound + 1e-12:
            raise ValueError("volume grid values exceed the per-order bound")
    vbound = volume_bound if volume_bound is not None else (max(abs(g) for g in grid) if grid else 0.0)

    configs: dict[tuple, PendingConfig] = {}
    for total in range(max_pending + 1):
        for counts in itertools.product(range(total + 1), repeat=n):
            if sum(counts) != total:
                continue
            per_level = [_aggregate_sums(grid, c) for c in counts]
            for volumes in itertools.product(*per_level):
                if sum(abs(v) for v in volumes) > pending_cap + 1e-12:
                    continue
                cfg = PendingConfig(tuple(counts), tuple(volumes))
                configs.setdefault(cfg.key(), cfg)
    ordered = sorted(configs.values(),
                     key=lambda c: (c.total_count, c.counts, c.volumes))
    for cfg in ordered:
        validate_config(cfg, max_pending, vbound, float(pending_cap))
    return ordered


@dataclass(frozen=True)
class ProblemSpec:
    """Abstract mixed-control problem the solver consumes.

    Coefficient callbacks must be deterministic functions of their arguments.
    """

    dim: int
    drift: Callable  # b(t, x, a) -> R^d
    diffusion: Callable  # sigma(t, x, a) -> R^{d x q}
    impulse_map: Callable  # Gamma(t, x, xi) -> R^d
    running_reward: Callable  # f(t, x, a)
    terminal_reward: Callable  # g(x)
    intervention_cashflow: Callable  # cash added to wealth at execution of (xi, level)
    ladder: PriorityLadder
    max_pending: int
    volume_bound: float
    pending_cap: float
    horizon: float
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.max_pending < 0:
            raise ValueError("max_pending must be >= 0")
        if self.volume_bound <= 0 or self.pending_cap <= 0:
            raise ValueError("volume bounds must be positive")
