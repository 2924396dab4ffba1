"""Declarative run configuration: INI-style file with sections, embedded
defaults, CLI overrides, and a content hash stamped into every artifact."""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass

from .control import PriorityLadder
from .errors import ConfigError
from .market import MarketParams

FORMAT_VERSION = 1

DEFAULTS = {
    "market": {
        "s0": "2820.0",
        "z0": "2820.0",
        "sigma_s": "160.458",
        "sigma_z": "16.0458",
        "kappa": "1.0",
        "depth": "50000.0",
        "temp_impact": "0.5",
        "running_penalty": "1.0",
        "terminal_penalty": "1.0",
        "horizon": "1.0",
    },
    "ladder": {
        "fees": "100, 300, 500",
        "rates": "2, 2.5, 3",
    },
    "book": {
        "max_pending": "1",
        "volume_bound": "28.0",
        "pending_cap": "inf",
    },
    "grid": {
        "t_steps": "200",
        "s_count": "61",
        "z_count": "61",
        "q_count": "41",
        "q_max": "25.0",
        "s_halfwidth": "auto",  # auto: 3 CEX sigma
    },
    "solver": {
        "nu_max": "35.0",
        "fee_mode": "optimal",
        "store_nu_every": "auto",
    },
    "sim": {
        "n_paths": "10000",
        "n_steps": "auto",  # auto: match the grid
        "seed": "0",
    },
    "output": {
        "directory": "out",
    },
}


@dataclass(frozen=True)
class RunConfig:
    market: MarketParams
    ladder: PriorityLadder
    max_pending: int
    volume_bound: float
    pending_cap: float
    t_steps: int
    s_count: int
    z_count: int
    q_count: int
    q_max: float
    s_halfwidth: float | None
    nu_max: float
    fee_mode: str
    store_nu_every: int | None
    n_paths: int
    sim_steps: int | None
    seed: int
    out_dir: str

    def as_flat_dict(self) -> dict:
        """Canonical flat representation used for hashing and manifests."""
        m = self.market
        return {
            "market.s0": m.s0, "market.z0": m.z0,
            "market.sigma_s": m.sigma_s, "market.sigma_z": m.sigma_z,
            "market.kappa": m.kappa, "market.depth": m.depth,
            "market.temp_impact": m.temp_impact,
            "market.running_penalty": m.running_penalty,
            "market.terminal_penalty": m.terminal_penalty,
            "market.horizon": m.horizon,
            "ladder.fees": list(self.ladder.fees),
            "ladder.rates": list(self.ladder.rates),
            "book.max_pending": self.max_pending,
            "book.volume_bound": self.volume_bound,
            "book.pending_cap": self.pending_cap,
            "grid.t_steps": self.t_steps,
            "grid.s_count": self.s_count, "grid.z_count": self.z_count,
            "grid.q_count": self.q_count, "grid.q_max": self.q_max,
            "grid.s_halfwidth": self.s_halfwidth,
            "solver.nu_max": self.nu_max, "solver.fee_mode": self.fee_mode,
            "solver.store_nu_every": self.store_nu_every,
            "sim.n_paths": self.n_paths, "sim.n_steps": self.sim_steps,
            "sim.seed": self.seed,
        }

    def config_hash(self) -> str:
        """Hash of everything a solve depends on. Simulation settings are
        excluded so changing the seed or path count does not invalidate
        solved artifacts."""
        flat = {k: v for k, v in self.as_flat_dict().items()
                if not k.startswith("sim.")}
        text = "\n".join(f"{k}={flat[k]!r}" for k in sorted(flat))
        return hashlib.sha256(text.encode()).hexdigest()


def default_config_text() -> str:
    """Default configuration in the file format the CLI reads."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _get(cp, section, key, conv):
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _optional(text: str, conv):
    return None if text.strip().lower() in ("auto", "none", "") else conv(text)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and overrides.

    Precedence: overrides > file > defaults. Unknown sections or keys are
    rejected so typos fail loudly.
    """
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        user = configparser.ConfigParser()
        try:
            with open(path) as fh:
                user.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        for section in user.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in user.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                cp.set(section, key, value)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        cp.set(section, key, str(value))

    try:
        market = MarketParams(
            s0=_get(cp, "market", "s0", float),
            z0=_get(cp, "market", "z0", float),
            sigma_s=_get(cp, "market", "sigma_s", float),
            sigma_z=_get(cp, "market", "sigma_z", float),
            kappa=_get(cp, "market", "kappa", float),
            depth=_get(cp, "market", "depth", float),
            temp_impact=_get(cp, "market", "temp_impact", float),
            running_penalty=_get(cp, "market", "running_penalty", float),
            terminal_penalty=_get(cp, "market", "terminal_penalty", float),
            horizon=_get(cp, "market", "horizon", float),
        )
        ladder = PriorityLadder(
            fees=_get(cp, "ladder", "fees", _floats),
            rates=_get(cp, "ladder", "rates", _floats),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    pending_cap = _get(cp, "book", "pending_cap", float)
    cfg = RunConfig(
        market=market,
        ladder=ladder,
        max_pending=_get(cp, "book", "max_pending", int),
        volume_bound=_get(cp, "book", "volume_bound", float),
        pending_cap=pending_cap if not math.isnan(pending_cap) else math.inf,
        t_steps=_get(cp, "grid", "t_steps", int),
        s_count=_get(cp, "grid", "s_count", int),
        z_count=_get(cp, "grid", "z_count", int),
        q_count=_get(cp, "grid", "q_count", int),
        q_max=_get(cp, "grid", "q_max", float),
        s_halfwidth=_get(cp, "grid", "s_halfwidth", lambda t: _optional(t, float)),
        nu_max=_get(cp, "solver", "nu_max", float),
        fee_mode=cp.get("solver", "fee_mode").strip(),
        store_nu_every=_get(cp, "solver", "store_nu_every",
                            lambda t: _optional(t, int)),
        n_paths=_get(cp, "sim", "n_paths", int),
        sim_steps=_get(cp, "sim", "n_steps", lambda t: _optional(t, int)),
        seed=_get(cp, "sim", "seed", int),
        out_dir=cp.get("output", "directory"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.fee_mode not in ("optimal", "random"):
        raise ConfigError("solver.fee_mode must be 'optimal' or 'random'")
    if cfg.max_pending < 0:
        raise ConfigError("book.max_pending must be >= 0")
    if cfg.volume_bound <= 0 or cfg.pending_cap <= 0:
        raise ConfigError("book volume bounds must be positive")
    if cfg.t_steps < 0:
        raise ConfigError("grid.t_steps must be >= 0")
    if min(cfg.s_count, cfg.z_count, cfg.q_count) < 3:
        raise ConfigError("grid axis counts must be >= 3")
    if cfg.q_max <= 0:
        raise ConfigError("grid.q_max must be positive")
    if cfg.nu_max <= 0:
        raise ConfigError("solver.nu_max must be positive")
    if cfg.n_paths < 1:
        raise ConfigError("sim.n_paths must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("sim.seed must be >= 0")
