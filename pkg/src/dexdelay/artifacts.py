"""Artifact serialization: solved fields and policies as .npz containers,
manifests and reports as canonical JSON, all stamped with the config hash."""

from __future__ import annotations

import json
import os

import numpy as np

from .config import FORMAT_VERSION, RunConfig
from .control import PendingConfig
from .errors import MissingArtifact
from .solver import GridSpec, PolicyTables, SolveResult, ValueField

VALUE_FILE = "value.npz"
POLICY_FILE = "policy.npz"
MANIFEST_FILE = "manifest.json"


def write_json(path, payload: dict) -> None:
    """Canonical JSON: sorted keys, fixed separators, newline-terminated, so
    identical payloads are byte-identical files."""
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, allow_nan=True)
        fh.write("\n")


def write_manifest(out_dir, config: RunConfig, extra: dict | None = None) -> dict:
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "config": {k: v for k, v in config.as_flat_dict().items()},
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(out_dir, MANIFEST_FILE), manifest)
    return manifest


def save_solution(out_dir, result: SolveResult, config: RunConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    g = result.value.grid
    counts = np.array([c.counts for c in g.configs], dtype=np.int64)
    volumes = np.array([c.volumes for c in g.configs])
    meta = dict(
        format_version=np.int64(FORMAT_VERSION),
        config_hash=np.bytes_(config.config_hash().encode()),
        t_steps=np.int64(g.t_steps),
        horizon=np.float64(g.horizon),
        s_axis=g.s_axis, z_axis=g.z_axis, q_axis=g.q_axis,
        volume_grid=np.asarray(g.volume_grid),
        config_counts=counts, config_volumes=volumes,
    )
    np.savez_compressed(
        os.path.join(out_dir, VALUE_FILE),
        t_indices=result.value.t_indices, values=result.value.values,
        residual_max=result.residual_max, residual_mean=result.residual_mean,
        **meta)
    p = result.policy
    np.savez_compressed(
        os.path.join(out_dir, POLICY_FILE),
        subcap_config_indices=p.subcap_config_indices,
        continuation=p.continuation, impulse_level=p.impulse_level,
        impulse_size_idx=p.impulse_size_idx,
        nu_t_indices=p.nu_t_indices, nu_star=p.nu_star,
        fee_mode=np.bytes_(p.fee_mode.encode()),
        **meta)
    write_manifest(out_dir, config, extra={
        "residual_max": float(result.residual_max.max(initial=0.0)),
        "residual_mean": float(result.residual_mean.mean()) if result.residual_mean.size else 0.0,
        # wall-clock timings are excluded so identical runs produce
        # byte-identical manifests
        "diagnostics": {k: (float(v) if isinstance(v, (int, float, np.floating))
                            else str(v))
                        for k, v in result.diagnostics.items()
                        if "runtime" not in k},
    })


def _check_stamp(data, path, config: RunConfig) -> None:
    stored = bytes(data["config_hash"]).decode()
    if stored != config.config_hash():
        raise MissingArtifact(
            f"{path} was produced under a different configuration "
            f"(hash {stored[:12]}.. vs {config.config_hash()[:12]}..)")
    if int(data["format_version"]) != FORMAT_VERSION:
        raise MissingArtifact(f"{path} has format version "
                              f"{int(data['format_version'])}, "
                              f"expected {FORMAT_VERSION}")


def load_solution(out_dir, config: RunConfig) -> SolveResult:
    vpath = os.path.join(out_dir, VALUE_FILE)
    ppath = os.path.join(out_dir, POLICY_FILE)
    for path in (vpath, ppath):
        if not os.path.exists(path):
            raise MissingArtifact(f"missing artifact {path}; run solve first")
    with np.load(vpath) as vd:
        _check_stamp(vd, vpath, config)
        configs = [PendingConfig(tuple(c), tuple(v))
                   for c, v in zip(vd["config_counts"], vd["config_volumes"])]
        grid = GridSpec(t_steps=int(vd["t_steps"]), s_axis=vd["s_axis"],
                        z_axis=vd["z_axis"], q_axis=vd["q_axis"],
                        configs=configs,
                        volume_grid=tuple(vd["volume_grid"]),
                        horizon=float(vd["horizon"]))
        field = ValueField(grid=grid, t_indices=vd["t_indices"],
                           values=vd["values"])
        residual_max = vd["residual_max"]
        residual_mean = vd["residual_mean"]
    with np.load(ppath) as pd_:
        _check_stamp(pd_, ppath, config)
        policy = PolicyTables(
            grid=grid,
            subcap_config_indices=pd_["subcap_config_indices"],
            continuation=pd_["continuation"],
            impulse_level=pd_["impulse_level"],
            impulse_size_idx=pd_["impulse_size_idx"],
            nu_t_indices=pd_["nu_t_indices"], nu_star=pd_["nu_star"],
            fee_mode=bytes(pd_["fee_mode"]).decode())
    return SolveResult(value=field, policy=policy,
                       residual_max=residual_max, residual_mean=residual_mean,
                       diagnostics={"loaded_from": out_dir})
