"""Command-line orchestration: solve, simulate, map extraction, ladder sweeps
and policy comparisons from one declarative config file.

Exit codes: 0 ok, 2 config error, 3 numerical error, 4 missing artifact.
Heavy imports happen after --threads is applied to the environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dexdelay",
        description="HJB-QVI solver and simulator for CEX-DEX trading "
                    "with priority-fee execution delays")
    p.add_argument("command",
                   choices=["solve", "simulate", "regions", "fees", "sweep",
                            "compare", "defaults"])
    p.add_argument("--config", help="path to an INI-style config file")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="simulation seed override")
    p.add_argument("--threads", type=int,
                   help="thread budget for numerical libraries")
    p.add_argument("--t", type=float, nargs="*",
                   help="time slices for regions/fees (default 0.2 0.5 0.8)")
    p.add_argument("--q", type=float, nargs="*",
                   help="inventory slices for regions/fees (default 0)")
    p.add_argument("--n-levels", dest="n_levels",
                   help="comma-separated ladder sizes for sweep, e.g. 1,2,3")
    return p


def _emit_error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code},
                     sort_keys=True))
    return code


def _load(args):
    from .config import load_config
    overrides = {}
    if args.out is not None:
        overrides["output.directory"] = args.out
    if args.seed is not None:
        overrides["sim.seed"] = args.seed
    return load_config(args.config, overrides)


def _problem_and_grid(cfg):
    from .market import build_problem
    from .solver import GridSpec
    problem = build_problem(cfg.market, cfg.ladder,
                            max_pending=cfg.max_pending,
                            volume_bound=cfg.volume_bound,
                            pending_cap=cfg.pending_cap)
    grid = GridSpec.build(problem, t_steps=cfg.t_steps,
                          s_count=cfg.s_count, z_count=cfg.z_count,
                          q_count=cfg.q_count, q_max=cfg.q_max,
                          s_halfwidth=cfg.s_halfwidth)
    return problem, grid


def _solve(cfg, fee_mode=None):
    from .solver import SolverOptions, solve
    problem, grid = _problem_and_grid(cfg)
    options = SolverOptions(nu_max=cfg.nu_max,
                            fee_mode=fee_mode or cfg.fee_mode,
                            store_nu_every=cfg.store_nu_every)
    return problem, grid, solve(problem, grid, options)


def _simulate(cfg, result, *, randomize_level=False):
    from .simulate import SimConfig, simulate
    return simulate(result, cfg.market, cfg.ladder,
                    max_pending=cfg.max_pending,
                    volume_bound=cfg.volume_bound,
                    pending_cap=cfg.pending_cap,
                    sim=SimConfig(n_paths=cfg.n_paths, n_steps=cfg.sim_steps,
                                  seed=cfg.seed,
                                  randomize_level=randomize_level))


def _v0_center(cfg, result):
    import numpy as np
    g = result.value.grid
    empty = next(i for i, c in enumerate(g.configs) if c.is_empty())
    i_s = int(np.argmin(np.abs(g.s_axis - cfg.market.s0)))
    i_z = int(np.argmin(np.abs(g.z_axis - cfg.market.z0)))
    i_q = int(np.argmin(np.abs(g.q_axis)))
    return float(result.value.at(0)[empty, i_s, i_z, i_q])


def cmd_defaults(args) -> int:
    from .config import default_config_text
    sys.stdout.write(default_config_text())
    return 0


def cmd_solve(args) -> int:
    from .artifacts import save_solution
    cfg = _load(args)
    _, _, result = _solve(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_solution(cfg.out_dir, result, cfg)
    print(json.dumps({
        "command": "solve", "out": cfg.out_dir,
        "config_hash": cfg.config_hash(),
        "v0_center": _v0_center(cfg, result),
        "residual_max": float(result.residual_max.max(initial=0.0)),
    }, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    from .artifacts import load_solution, write_json
    cfg = _load(args)
    result = load_solution(cfg.out_dir, cfg)
    out = _simulate(cfg, result,
                    randomize_level=result.policy.fee_mode == "random")
    report = {
        "config_hash": cfg.config_hash(),
        "n_paths": cfg.n_paths, "seed": cfg.seed,
        "mean_j": out.mean, "std_error": out.std_error,
        "v0_center": _v0_center(cfg, result),
        "n_submitted": out.n_submitted, "n_executed": out.n_executed,
        "grid_escapes": out.grid_escapes,
        "mean_running": float(out.running.mean()),
        "mean_execution": float(out.execution.mean()),
        "mean_terminal": float(out.terminal.mean()),
        "delay_means": [float(d.mean()) if d.size else None
                        for d in out.delays],
    }
    write_json(os.path.join(cfg.out_dir, "report_simulate.json"), report)
    print(json.dumps({"command": "simulate", "mean_j": out.mean,
                      "std_error": out.std_error}, sort_keys=True))
    return 0


def _map_command(args, kind: str) -> int:
    import numpy as np
    from .artifacts import load_solution, write_json
    from .policy import extract_region, write_region_csv, write_region_png
    cfg = _load(args)
    result = load_solution(cfg.out_dir, cfg)
    times = args.t if args.t else [0.2, 0.5, 0.8]
    qs = args.q if args.q else [0.0]
    h8 = cfg.config_hash()[:8]
    n = cfg.ladder.n_levels
    stats = []
    for t in times:
        for q in qs:
            region = extract_region(result.policy, t, q)
            stem = f"{kind}_t{t:g}_q{q:g}_N{n}_{h8}"
            write_region_csv(region, os.path.join(cfg.out_dir, stem + ".csv"))
            write_region_png(region, os.path.join(cfg.out_dir, stem + ".png"),
                             color_by="size" if kind == "region" else "level",
                             title=f"t={t:g}, q={q:g}")
            diag_continue = bool(all(
                region.continuation[i, j] for i in range(region.s_axis.size)
                for j in [int(np.argmin(np.abs(region.z_axis
                                               - region.s_axis[i])))]))
            ex = ~region.continuation
            sizes = region.size[ex]
            stats.append({
                "t": t, "q": q,
                "exercise_measure": region.exercise_measure,
                "diagonal_in_continuation": diag_continue,
                "all_sells": bool((sizes < 0).all()) if sizes.size else None,
                "all_buys": bool((sizes > 0).all()) if sizes.size else None,
                "level_counts": {str(l): int((region.level[ex] == l).sum())
                                 for l in range(n)},
            })
    write_json(os.path.join(cfg.out_dir, f"report_{kind}s.json"),
               {"config_hash": cfg.config_hash(), "stats": stats})
    print(json.dumps({"command": f"{kind}s", "slices": len(stats)},
                     sort_keys=True))
    return 0


def cmd_regions(args) -> int:
    return _map_command(args, "region")


def cmd_fees(args) -> int:
    return _map_command(args, "fee")


def cmd_sweep(args) -> int:
    import csv as _csv
    from .artifacts import write_json
    from .policy import value_norm_sweep
    cfg = _load(args)
    n_list = ([int(x) for x in args.n_levels.replace(",", " ").split()]
              if args.n_levels else [1, 2, 3])
    problem, grid = _problem_and_grid(cfg)
    rows = value_norm_sweep(problem, grid, n_list)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_json(os.path.join(cfg.out_dir, "sweep.json"),
               {"config_hash": cfg.config_hash(), "rows": rows})
    with open(os.path.join(cfg.out_dir, "sweep.csv"), "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["n_levels", "norm", "v0_center"])
        for r in rows:
            w.writerow([r["n_levels"], f"{r['norm']:.10g}",
                        f"{r['v0_center']:.10g}"])
    print(json.dumps({"command": "sweep",
                      "norms": [r["norm"] for r in rows]}, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    import numpy as np
    from .artifacts import write_json
    from .simulate import compare
    cfg = _load(args)
    _, _, res_opt = _solve(cfg, fee_mode="optimal")
    _, _, res_rnd = _solve(cfg, fee_mode="random")
    sim_opt = _simulate(cfg, res_opt)
    sim_rnd = _simulate(cfg, res_opt, randomize_level=True)
    paired = compare(sim_opt, sim_rnd)
    g = res_opt.value.grid
    empty = next(i for i, c in enumerate(g.configs) if c.is_empty())
    norm_opt = float(np.linalg.norm(res_opt.value.at(0)[empty]))
    norm_rnd = float(np.linalg.norm(res_rnd.value.at(0)[empty]))
    report = {
        "config_hash": cfg.config_hash(),
        "mc": paired.as_dict(),
        "mc_ratio": (paired.mean_a / paired.mean_b
                     if paired.mean_b else None),
        "value_norm_optimal": norm_opt,
        "value_norm_random": norm_rnd,
        "value_norm_ratio": norm_opt / norm_rnd if norm_rnd else None,
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_json(os.path.join(cfg.out_dir, "compare.json"), report)
    print(json.dumps({"command": "compare",
                      "diff_mean": paired.diff_mean,
                      "significant_95": paired.significant_95},
                     sort_keys=True))
    return 0


COMMANDS = {
    "defaults": cmd_defaults,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "regions": cmd_regions,
    "fees": cmd_fees,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .errors import ConfigError, DexDelayError, MissingArtifact
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _emit_error("ConfigError", str(exc), 2)
    except MissingArtifact as exc:
        return _emit_error("MissingArtifact", str(exc), 4)
    except (DexDelayError, ValueError, ArithmeticError) as exc:
        return _emit_error(type(exc).__name__, str(exc), 3)


if __name__ == "__main__":
    sys.exit(main())
