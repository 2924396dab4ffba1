"""CEX-DEX market model: constant-product AMM execution costs and impact,
running/terminal rewards, and the concrete problem the solver consumes.

Prices: s is the CEX price (driftless), z the DEX pool midprice mean-reverting
toward s at speed kappa. The AMM has constant-product reserves with depth d,
so reserves at midprice z are x = d/sqrt(z) (asset) and y = d*sqrt(z) (cash).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .control import PendingConfig, PriorityLadder, ProblemSpec
from .errors import NonPositivePrice, PoolDrain


@dataclass(frozen=True)
class MarketParams:
    """Model parameters. Defaults follow an ETH-USDC calibration."""

    s0: float = 2820.0
    z0: float = 2820.0
    sigma_s: float = 0.0569 * 2820.0
    sigma_z: float = 0.00569 * 2820.0
    kappa: float = 1.0
    depth: float = 50_000.0
    temp_impact: float = 0.5  # CEX quadratic trading cost coefficient k
    running_penalty: float = 1.0  # phi
    terminal_penalty: float = 1.0  # Xi
    horizon: float = 1.0

    def __post_init__(self):
        if self.sigma_s <= 0 or self.sigma_z <= 0:
            raise ValueError("volatilities must be positive")
        if self.kappa < 0 or self.depth <= 0 or self.temp_impact <= 0:
            raise ValueError("kappa >= 0, depth > 0, temp_impact > 0 required")
        if self.running_penalty < 0 or self.terminal_penalty < 0:
            raise ValueError("penalties must be non-negative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.s0 <= 0 or self.z0 <= 0:
            raise ValueError("initial prices must be positive")


@dataclass(frozen=True)
class TradingState:
    s: float
    z: float
    q: float
    cash: float = 0.0

    def __post_init__(self):
        if self.s <= 0 or self.z <= 0:
            raise NonPositivePrice(f"prices must be positive, got s={self.s}, z={self.z}")


def psi(z, depth):
    """Marginal price-impact coefficient of the pool, 2*z^(3/2)/depth."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise NonPositivePrice("psi requires z > 0")
    if depth <= 0:
        raise NonPositivePrice("psi requires depth > 0")
    out = 2.0 * z ** 1.5 / depth
    return float(out) if out.ndim == 0 else out

def impact(xi, z, depth):
    """Midprice jump caused by a swap of signed size xi: psi(z) * xi."""
    return psi(z, depth) * np.asarray(xi, dtype=float)


def swap_cashflow(xi, z, depth):
    """Cash received for swapping signed size xi against the pool.

    Negative for buys (xi > 0), positive for sells (xi < 0), zero at xi = 0.
    Closed form: d^2/(xi - d*sqrt(1/z)) + d*sqrt(z).
    """
    xi = np.asarray(xi, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise NonPositivePrice("swap_cashflow requires z > 0")
    pole = depth / np.sqrt(z)
    if np.any(xi >= pole):
        raise PoolDrain("swap size would drain the pool")
    out = depth ** 2 / (xi - pole) + depth * np.sqrt(z)
    # the zero trade costs exactly nothing; the closed form only cancels to
    # rounding
    out = np.where(xi == 0.0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def cpmm_reserves(z, depth):
    """Constant-product reserves (asset, cash) at midprice z: x*y = depth^2."""
    if np.any(np.asarray(z) <= 0):
        raise NonPositivePrice("reserves require z > 0")
    return depth / np.sqrt(z), depth * np.sqrt(z)


def impulse_map(state: TradingState, xi: float, depth: float) -> TradingState:
    """Post-execution state: q shifts by xi, z jumps by the linear impact.
    Cash is handled separately by intervention_cashflow."""
    z_new = state.z + impact(xi, state.z, depth)
    if z_new <= 0:
        raise NonPositivePrice(f"impact drives pool price to {z_new}")
    return replace(state, z=float(z_new), q=state.q + xi)


def intervention_cashflow(xi, z, level: int, ladder: PriorityLadder, depth: float):
    """Cash added to wealth when a pending order of size xi executes at
    priority `level`: swap proceeds minus the level's fee."""
    return swap_cashflow(xi, z, depth) - ladder.fees[level]


def running_reward(s, q, nu, params: MarketParams):
    """-nu*(s + k*nu) - phi*q^2 per unit time."""
    s = np.asarray(s, dtype=float)
    out = -nu * (s + params.temp_impact * nu) - params.running_penalty * np.asarray(q) ** 2
    return float(out) if np.ndim(out) == 0 else out


def terminal_reward(s, q, params: MarketParams):
    """Mark inventory to the CEX price with a quadratic penalty: q*s - Xi*q^2."""
    out = np.asarray(q) * np.asarray(s) - params.terminal_penalty * np.asarray(q) ** 2
    return float(out) if np.ndim(out) == 0 else out


def drift_diffusion(state: TradingState, nu: float, params: MarketParams):
    """Drift vector and diffusion matrix of (s, z, q).

    s is driftless, z reverts to s at speed kappa, q moves at the trading
    rate. The two Brownian drivers (W^S, W^Z) are independent: the diffusion
    matrix columns correspond to (W^S, W^Z).
    """
    drift = np.array([0.0, params.kappa * (state.s - state.z), nu])
    diffusion = np.array([
        [params.sigma_s, 0.0],
        [0.0, params.sigma_z],
        [0.0, 0.0],
    ])
    return drift, diffusion


def build_problem(params: MarketParams, ladder: PriorityLadder, *,
                  max_pending: int, volume_bound: float,
                  pending_cap: float) -> ProblemSpec:
    """Assemble the abstract problem for the CEX-DEX model."""

    def b(t, x, a):
        s, z, q = x
        return np.array([0.0, params.kappa * (s - z), a])

    def sigma(t, x, a):
        return np.array([[params.sigma_s, 0.0], [0.0, params.sigma_z], [0.0, 0.0]])

    def gamma(t, x, xi):
        s, z, q = x
        return np.array([s, z + impact(xi, z, params.depth), q + xi])

    def f(t, x, a):
        s, z, q = x
        return running_reward(s, q, a, params)

    def g(x):
        s, z, q = x
        return terminal_reward(s, q, params)

    def c(t, x, xi, level):
        s, z, q = x
        return intervention_cashflow(xi, z, level, ladder, params.depth)

    return ProblemSpec(
        dim=3,
        drift=b,
        diffusion=sigma,
        impulse_map=gamma,
        running_reward=f,
        terminal_reward=g,
        intervention_cashflow=c,
        ladder=ladder,
        max_pending=max_pending,
        volume_bound=volume_bound,
        pending_cap=pending_cap,
        horizon=params.horizon,
        extras={"market": params},
    )
