"""Glue between the run config and the library: data, training, sampling, analysis.

Run directory layout::

    config.yaml          resolved config of the latest command
    run_info.json        code version, command history, input hashes
    data/                trajectories, system files, pair manifest
    train/               metrics.jsonl, checkpoints, index.json
    chains/              sampler and exploration output
    reports/             analysis reports and figures
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (chain_features, compare_conditionals, effective_sample_size, free_energy_profile,
                       speedup_factor, tica_fit)
from .config import RunConfig
from .core import RngStream, SystemSpec
from .dataset import PairDataset, PairGroup, pairs_from_trajectories, replica_pairs
from .dynamics import (LangevinParams, Trajectory, conditional_ensemble, initial_positions, simulate,
                       simulate_replicas)
from .energy import AugmentedTarget, make_potential
from .fileio import file_sha256, write_container
from .flow import ConditionalFlow, FlowConfig
from .sampler import Chain, DihedralSignConstraint, explore, sample_mcmc
from .systems import bead_chain, point_system
from .training import LIKELIHOOD, LossWeights, TrainConfig, train

log = logging.getLogger(__name__)

# stream ids, one per pipeline stage
STREAM_DATA, STREAM_TRAIN, STREAM_SAMPLE, STREAM_EXPLORE, STREAM_EVAL = 1, 2, 3, 4, 5


class PipelineError(RuntimeError):
    pass


def build_systems(cfg: RunConfig):
    s = cfg.system
    if s.kind in ("double_well", "mueller_brown", "harmonic"):
        dim = 2 if s.kind == "mueller_brown" else s.dimension
        return [point_system(s.kind, dim, s.n_atoms)], []
    if s.kind == "chain":
        return [bead_chain(s.sequence, dimension=s.dimension)], []
    return ([bead_chain(t, dimension=s.dimension) for t in s.train_sequences],
            [bead_chain(t, dimension=s.dimension) for t in s.heldout_sequences])


def potential_for(system: SystemSpec, cfg: RunConfig):
    kind = cfg.system.kind
    kind = "bead_chain" if kind in ("chain", "chain_family") else kind
    params = dict(cfg.potential.params)
    return make_potential(kind, params, system if kind == "bead_chain" else None, cfg.potential.temperature)


def langevin_for(system: SystemSpec, cfg: RunConfig) -> LangevinParams:
    d = cfg.dynamics
    return LangevinParams(d.dt, d.gamma, cfg.potential.temperature, tuple(system.masses))


def flow_config(cfg: RunConfig, dimension: int) -> FlowConfig:
    f = cfg.flow
    canon = f.canonicalize
    if canon is None:
        canon = cfg.system.kind in ("chain", "chain_family")
    return FlowConfig(dimension=dimension, n_coupling=f.n_coupling, n_transformer=f.n_transformer,
                      hidden=f.hidden, embed=f.embed, lengthscales=tuple(f.lengthscales), n_types=f.n_types,
                      scale_clamp=f.scale_clamp, layer_norm=f.layer_norm, canonicalize=canon,
                      init_seed=cfg.seed)


def _record(out: Path, cfg: RunConfig, command: str, inputs: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    info_path = out / "run_info.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {"code_version": __version__, "history": []}
    info["history"].append({"command": command, "seed": cfg.seed,
                            "inputs": {k: v for k, v in (inputs or {}).items()}})
    info_path.write_text(json.dumps(info, indent=2))


def gen_data(cfg: RunConfig) -> dict:
    out = Path(cfg.output_dir)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    train_sys, heldout = build_systems(cfg)
    rng = RngStream(cfg.seed, STREAM_DATA)
    d = cfg.dynamics
    burn = d.burn_in_tau * d.tau_steps
    items, files = [], []
    plan = [(s, "train", d.n_frames) for s in train_sys] + [(s, "val", d.val_frames) for s in train_sys] + \
           [(s, "test", d.val_frames) for s in heldout]
    groups = []
    for k, (system, split, n_frames) in enumerate(plan):
        pot = potential_for(system, cfg)
        params = langevin_for(system, cfg)
        system.save(data / f"system_{system.name}.json")
        if d.replicas > 1:
            # independent replicas of n_frames / replicas frames each
            per = max(2, n_frames // d.replicas)
            frames = simulate_replicas(system, pot, params, initial_positions(system, pot), per * d.tau_steps,
                                       d.tau_steps, [rng.substream(k, r) for r in range(d.replicas)],
                                       burn_in_steps=burn)
            path = data / f"replicas_{split}_{system.name}.wmc"
            digest = write_container(path, "replicas", {"system": system.to_dict(), "spacing": d.tau_steps},
                                     {"frames": frames})
            p = replica_pairs(frames, min(cfg.dataset.max_pairs, frames.shape[0] * (frames.shape[1] - 1)),
                              rng.substream(10_000, k))
            groups.append(PairGroup(system, p.start, p.end, d.tau_steps, split, path.name))
        else:
            traj = simulate(system, pot, params, n_frames * d.tau_steps, d.tau_steps, rng.substream(k),
                            burn_in_steps=burn)
            path = data / f"traj_{split}_{system.name}.wmc"
            traj.wall_time = 0.0  # keep data files bitwise reproducible
            digest = traj.save(path)
            items.append((traj, split, path.name))
        files.append({"file": path.name, "sha256": digest, "split": split, "system": system.name})
    if items:
        groups += pairs_from_trajectories(items, cfg.dataset.max_pairs, rng.substream(10_000)).groups
    ds = PairDataset(groups)
    manifest = ds.save(data)
    _record(out, cfg, "gen-data")
    summary = {"trajectories": files, "manifest": Path(manifest).name, "pairs": len(ds)}
    (data / "trajectories.json").write_text(json.dumps(summary, indent=2))  # relative paths only
    return {**summary, "manifest": str(manifest)}


def load_dataset(cfg: RunConfig) -> PairDataset:
    path = Path(cfg.output_dir) / "data" / "manifest.json"
    if not path.exists():
        raise PipelineError(f"{path} not found; run gen-data first")
    return PairDataset.load(path)


def targets_for(systems, cfg) -> dict:
    return {s.name: AugmentedTarget(potential_for(s, cfg)) for s in systems}


def _index_path(cfg):
    return Path(cfg.output_dir) / "train" / "index.json"


def latest_checkpoint(cfg: RunConfig):
    p = _index_path(cfg)
    if not p.exists():
        return None
    return json.loads(p.read_text()).get("latest")


def load_flow(cfg: RunConfig, checkpoint: str | None = None):
    """Load the given checkpoint, or the latest one; the recorded hash must match."""
    entry = latest_checkpoint(cfg)
    if checkpoint is not None:
        path, expected = Path(checkpoint), None
        if entry and Path(entry["path"]).resolve() == path.resolve():
            expected = entry["sha256"]
    elif entry is None:
        raise PipelineError("no checkpoint found; run train first")
    else:
        path, expected = Path(entry["path"]), entry["sha256"]
    try:
        flow, meta = ConditionalFlow.load(path, expected_sha256=expected)
    except ValueError as exc:
        raise PipelineError(f"refusing to use checkpoint: {exc}") from exc
    return flow, meta, path


def train_config(cfg: RunConfig, steps: int, stage: str = "likelihood") -> TrainConfig:
    """Stage (ii) is a fixed-budget fine-tune and keeps its final parameters; its
    validation total mixes in the noisy acceptance term and is only logged."""
    t = cfg.training
    lr = t.lr if stage == "likelihood" else (t.acceptance_lr or t.lr)
    return TrainConfig(lr=lr, batch_size=t.batch_size, max_steps=steps, eval_every=t.eval_every,
                       patience=t.patience, max_halvings=t.max_halvings, rotate=t.rotate,
                       checkpoint_every=t.checkpoint_every, grad_clip=t.grad_clip,
                       restore_best=stage == "likelihood")


def run_train(cfg: RunConfig, stage: str = "likelihood", dry_run: bool = False) -> dict:
    train_sys, _ = build_systems(cfg)
    dim = train_sys[0].dimension
    out = Path(cfg.output_dir) / "train"
    if stage == "acceptance":
        flow, _, _ = load_flow(cfg)
    else:
        flow = ConditionalFlow(flow_config(cfg, dim))
    if dry_run:
        return {"parameters": flow.n_parameters(), "stage": stage}
    ds = load_dataset(cfg)
    t = cfg.training
    if stage == "likelihood":
        weights, steps = LIKELIHOOD, t.likelihood_steps
    elif stage == "acceptance":
        weights, steps = LossWeights(t.w_lik, t.w_acc, t.w_ent), t.acceptance_steps
    else:
        raise PipelineError(f"unknown stage {stage!r}")
    targets = targets_for(train_sys, cfg)
    rng = RngStream(cfg.seed, (STREAM_TRAIN, 0 if stage == "likelihood" else 1))
    res = train(flow, ds.split("train"), ds.split("val"), weights, train_config(cfg, steps, stage), rng,
                targets=targets, run_dir=out, stage=stage)
    path, digest = res.checkpoints[-1]
    index = json.loads(_index_path(cfg).read_text()) if _index_path(cfg).exists() else {"checkpoints": []}
    entry = {"path": path, "sha256": digest, "stage": stage, "steps": res.steps, "best_val": res.best_val}
    index["checkpoints"].append(entry)
    index["latest"] = entry
    _index_path(cfg).write_text(json.dumps(index, indent=2))
    _record(Path(cfg.output_dir), cfg, f"train --stage {stage}", {"manifest": str(Path(cfg.output_dir) / "data")})
    return {"stage": stage, "steps": res.steps, "best_val": res.best_val, "initial_val": res.initial_val,
            "stop_reason": res.stop_reason, "checkpoint": path, "parameters": flow.n_parameters()}


def _pick_system(cfg: RunConfig, name: str | None) -> SystemSpec:
    train_sys, heldout = build_systems(cfg)
    pool = heldout + train_sys
    if name is None:
        return pool[0]
    for s in pool:
        if s.name == name:
            return s
    raise PipelineError(f"unknown system {name!r}; known: {[s.name for s in pool]}")


def _constraint(cfg):
    c = cfg.sampler.constraint
    return None if not c else DihedralSignConstraint(*c)


def run_sample(cfg: RunConfig, steps: int | None = None, batch: int | None = None, system: str | None = None,
               checkpoint: str | None = None) -> dict:
    flow, _, ckpt = load_flow(cfg, checkpoint)
    sys_ = _pick_system(cfg, system)
    pot = potential_for(sys_, cfg)
    M = steps or cfg.sampler.steps
    B = batch or cfg.sampler.batch
    x0 = initial_positions(sys_, pot)
    chain = sample_mcmc(flow, AugmentedTarget(pot), x0, M, B, RngStream(cfg.seed, STREAM_SAMPLE),
                        _constraint(cfg), sys_.types_array)
    chain.meta.update({"checkpoint": str(ckpt), "checkpoint_sha256": file_sha256(ckpt), "M": M, "B": B,
                       "seed": cfg.seed})
    path = Path(cfg.output_dir) / "chains" / f"mcmc_{sys_.name}.wmc"
    chain.save(path, sys_)
    _record(Path(cfg.output_dir), cfg, "sample", {"checkpoint": file_sha256(ckpt)})
    return {"chain": str(path), "states": chain.length, "acceptance_rate": chain.acceptance_rate,
            "t_sampling": chain.t_sampling}


def run_explore(cfg: RunConfig, chains: int | None = None, steps: int | None = None, system: str | None = None,
                checkpoint: str | None = None) -> dict:
    flow, _, ckpt = load_flow(cfg, checkpoint)
    sys_ = _pick_system(cfg, system)
    pot = potential_for(sys_, cfg)
    C = chains or cfg.sampler.explore_chains
    M = steps or cfg.sampler.explore_steps
    du = cfg.sampler.du_max_factor * cfg.potential.temperature
    chain = explore(flow, pot, initial_positions(sys_, pot), M, du, RngStream(cfg.seed, STREAM_EXPLORE),
                    _constraint(cfg), sys_.types_array, n_chains=C)
    chain.meta.update({"checkpoint": str(ckpt), "checkpoint_sha256": file_sha256(ckpt), "seed": cfg.seed})
    path = Path(cfg.output_dir) / "chains" / f"explore_{sys_.name}.wmc"
    chain.save(path, sys_)
    _record(Path(cfg.output_dir), cfg, "explore", {"checkpoint": file_sha256(ckpt)})
    return {"chain": str(path), "chains": C, "steps": M, "acceptance_rate": chain.acceptance_rate,
            "t_sampling": chain.t_sampling}


def _frames_and_time(path):
    """(positions (T, N, d), wall time, system) from a chain or trajectory file."""
    from .fileio import read_container

    meta, _ = read_container(path)
    if "n_chains" in meta:
        ch = Chain.load(path)
        sys_ = SystemSpec.from_dict(ch.meta["system"]) if ch.meta.get("system") else None
        return ch.states[0], ch.t_sampling, sys_
    traj = Trajectory.load(path)
    return traj.frames, float(meta.get("wall_time", 0.0)) or float("nan"), traj.system


def analyze(model_path, reference_path, out_dir, lag: int = 10, n_bins: int = 50, component: int = 0,
            temperature: float = 1.0, model_time: float | None = None, reference_time: float | None = None) -> dict:
    """Project both chains on TICs fit to the reference; report ESS/s and speed-up."""
    from .analysis import plots

    a, ta, sys_a = _frames_and_time(model_path)
    b, tb, sys_b = _frames_and_time(reference_path)
    ta = model_time or ta
    tb = reference_time or tb
    system = sys_b or sys_a
    fa, fb = chain_features(a, system), chain_features(b, system)
    tica = tica_fit(fb, lag)
    ya, yb = tica.transform(fa), tica.transform(fb)
    report = {"tica_eigenvalues": tica.eigenvalues.tolist(), "component": component, "lag": lag,
              "ess_model": effective_sample_size(ya[:, component]),
              "ess_reference": effective_sample_size(yb[:, component]),
              "t_model": ta, "t_reference": tb}
    if np.isfinite(ta) and np.isfinite(tb) and ta > 0 and tb > 0:
        report["speedup"] = speedup_factor(fa, ta, fb, tb, tica, component)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo = min(ya[:, component].min(), yb[:, component].min())
    hi = max(ya[:, component].max(), yb[:, component].max())
    prof = {"model": free_energy_profile(ya[:, component], n_bins, temperature, (lo, hi)),
            "reference": free_energy_profile(yb[:, component], n_bins, temperature, (lo, hi))}
    report["free_energy"] = {k: {"centers": p.centers.tolist(),
                                 "values": [None if np.isnan(v) else float(v) for v in p.values]}
                             for k, p in prof.items()}
    dim = min(2, ya.shape[1])
    plots.projection_scatter(out / "tica.png", {"model": ya[:, :dim], "reference": yb[:, :dim]})
    plots.free_energy_curves(out / "free_energy.png", prof)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def eval_conditional(cfg: RunConfig, n_samples: int = 1000, system: str | None = None,
                     checkpoint: str | None = None, frame: int = 0, self_check: bool = False) -> dict:
    """Flow samples vs an MD ensemble started from one test frame."""
    sys_ = _pick_system(cfg, system)
    pot = potential_for(sys_, cfg)
    params = langevin_for(sys_, cfg)
    x0 = initial_positions(sys_, pot)
    if (Path(cfg.output_dir) / "data" / "manifest.json").exists():
        ds = load_dataset(cfg)
        for g in ds.groups:
            if g.system.name == sys_.name and len(g):
                x0 = g.start[min(frame, len(g) - 1)]
                break
    tau = cfg.dynamics.tau_steps

    def oracle(x, n, rng):
        return conditional_ensemble(sys_, pot, params, x, tau, n, rng)

    model = oracle if self_check else load_flow(cfg, checkpoint)[0]
    rep = compare_conditionals(model, oracle, x0, n_samples, RngStream(cfg.seed, STREAM_EVAL), pot, sys_,
                               sys_.types_array)
    rep.pop("samples")
    out = Path(cfg.output_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"conditional_{sys_.name}.json").write_text(json.dumps(rep, indent=2))
    return rep
