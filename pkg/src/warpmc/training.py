"""Losses and the two-stage training loop.

All losses are minimised:

    loss_lik = -mean log p(x(t+tau) | x(t))
    loss_acc = -mean log r(X, X~)            X~ drawn from the flow (pathwise)
    loss_ent = +mean log p(X~ | x(t))        i.e. negative entropy

so the total ``w_lik*loss_lik + w_acc*loss_acc + w_ent*loss_ent`` rewards
likelihood, acceptance and entropy.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .core import as_rng
from .dataset import Batch, PairDataset
from .diffcore import Tensor
from .energy import AugmentedTarget, gaussian_log_pdf
from .flow import ConditionalFlow, FlowError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_lik: float = 1.0
    w_acc: float = 0.0
    w_ent: float = 0.0

    def __post_init__(self):
        w = (self.w_lik, self.w_acc, self.w_ent)
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError("loss weights must be non-negative and not all zero")


LIKELIHOOD = LossWeights(1.0, 0.0, 0.0)
ACCEPTANCE = LossWeights(0.99, 0.01, 0.1)


class BatchEnergy:
    """Energies for a batch whose rows belong to different systems."""

    def __init__(self, potentials: list, rows: list):
        self.potentials = potentials
        self.rows = rows  # list of index arrays, one per potential

    @classmethod
    def for_batch(cls, targets: dict, names) -> "BatchEnergy":
        names = np.asarray(names)
        pots, rows = [], []
        for name in dict.fromkeys(names.tolist()):
            if name not in targets:
                raise KeyError(f"no target registered for system {name!r}")
            pots.append(targets[name].potential)
            rows.append(np.flatnonzero(names == name))
        return cls(pots, rows)

    def energy_and_gradient(self, x):
        e = np.empty(x.shape[0])
        g = np.empty_like(x)
        for pot, idx in zip(self.potentials, self.rows):
            e[idx], g[idx] = pot.energy_and_gradient(x[idx])
        return e, g

    def energy(self, x):
        e = np.empty(x.shape[0])
        for pot, idx in zip(self.potentials, self.rows):
            e[idx] = pot.energy(x[idx])
        return e


def _temperatures(targets: dict, names) -> np.ndarray:
    return np.array([targets[n].T for n in names], dtype=np.float64)


# likelihood
def log_density_batch(flow: ConditionalFlow, batch: Batch) -> Tensor:
    return flow.log_density_tensor(Tensor(batch.end), Tensor(batch.aux_end), Tensor(batch.start), batch.types)


def loss_lik(flow: ConditionalFlow, batch: Batch, max_bad_fraction: float = 0.01):
    """Returns (loss tensor, number of skipped non-finite samples)."""
    try:
        lp = log_density_batch(flow, batch)
        bad = ~np.isfinite(lp.value)
    except FlowError:
        with dc.no_grad():
            bad = np.array([not _finite_row(flow, batch, k) for k in range(len(batch.start))])
    n_bad = int(bad.sum())
    if n_bad:
        if n_bad > max_bad_fraction * len(bad):
            raise TrainingError(f"{n_bad}/{len(bad)} samples have non-finite log-density")
        keep = np.flatnonzero(~bad)
        batch = Batch(batch.types[keep], batch.start[keep], batch.end[keep], batch.aux_start[keep],
                      batch.aux_end[keep], tuple(batch.systems[k] for k in keep))
        lp = log_density_batch(flow, batch)
    return -dc.mean(lp), n_bad


def _finite_row(flow, batch, k):
    try:
        v = flow.log_density(batch.end[k], batch.aux_end[k], batch.start[k], batch.types[k])
    except FlowError:
        return False
    return bool(np.isfinite(v))


# acceptance ratio
def r_theta(flow: ConditionalFlow, target: AugmentedTarget, X, Xt, types) -> np.ndarray:
    """log r(X, X~) for states given as (positions, auxiliaries); batched."""
    xp, xv = (np.asarray(a, dtype=np.float64) for a in X)
    yp, yv = (np.asarray(a, dtype=np.float64) for a in Xt)
    # grouped as a - b so that swapping the states negates the result exactly
    forward = target.log_density(yp, yv) + flow.log_density(xp, xv, yp, types)
    backward = target.log_density(xp, xv) + flow.log_density(yp, yv, xp, types)
    return forward - backward


def acceptance_terms(flow: ConditionalFlow, energy, temps, cond, aux, types, zp, zv):
    """Differentiable log r and forward log-density for flow samples from fixed latents.

    ``energy`` provides ``energy_and_gradient`` over the batch rows; ``temps``
    holds one temperature per row.
    """
    c = Tensor(cond)
    yp, yv, logp_fwd = flow.sample_tensors(Tensor(zp), Tensor(zv), c, types)
    logp_rev = flow.log_density_tensor(c, Tensor(aux), yp, types)
    log_mu_new = dc.energy_op(energy, yp) * (-1.0 / temps) + _gauss(yv)
    log_mu_old = -energy.energy(cond) / temps + gaussian_log_pdf(aux)
    log_r = log_mu_new + logp_rev - log_mu_old - logp_fwd
    return log_r, logp_fwd


def _gauss(v: Tensor) -> Tensor:
    n = v.shape[1] * v.shape[2]
    return dc.mul(dc.tsum(dc.square(v), axis=(1, 2)), -0.5) - 0.5 * n * math.log(2 * math.pi)


def _latents(rng, shape, latents):
    if latents is not None:
        return latents
    rng = as_rng(rng)
    return rng.normal(shape), rng.normal(shape)


def loss_acc(flow, targets: dict, batch: Batch, rng, latents=None) -> Tensor:
    zp, zv = _latents(rng, batch.start.shape, latents)
    energy = BatchEnergy.for_batch(targets, batch.systems)
    log_r, _ = acceptance_terms(flow, energy, _temperatures(targets, batch.systems), batch.start,
                                batch.aux_start, batch.types, zp, zv)
    return -dc.mean(log_r)


def loss_ent(flow, batch: Batch, rng, latents=None) -> Tensor:
    zp, zv = _latents(rng, batch.start.shape, latents)
    _, _, logp = flow.sample_tensors(Tensor(zp), Tensor(zv), Tensor(batch.start), batch.types)
    return dc.mean(logp)


def total_loss(flow, batch: Batch, weights: LossWeights, targets: dict | None, rng):
    """Weighted loss and a dict of the individual terms (floats)."""
    terms = {}
    total = 0.0
    if weights.w_lik:
        l, skipped = loss_lik(flow, batch)
        terms["lik"] = float(l.value)
        terms["skipped"] = skipped
        total = total + weights.w_lik * l
    if weights.w_acc or weights.w_ent:
        rng = as_rng(rng)
        zp, zv = rng.normal(batch.start.shape), rng.normal(batch.start.shape)
        if weights.w_acc:
            if targets is None:
                raise TrainingError("acceptance loss needs targets")
            energy = BatchEnergy.for_batch(targets, batch.systems)
            log_r, logp = acceptance_terms(flow, energy, _temperatures(targets, batch.systems), batch.start,
                                           batch.aux_start, batch.types, zp, zv)
            la = -dc.mean(log_r)
            terms["acc"] = float(la.value)
            terms["accept_prob"] = float(np.mean(np.exp(np.minimum(0.0, log_r.value))))
            total = total + weights.w_acc * la
            if weights.w_ent:
                le = dc.mean(logp)
                terms["ent"] = float(le.value)
                total = total + weights.w_ent * le
        else:
            le = loss_ent(flow, batch, None, (zp, zv))
            terms["ent"] = float(le.value)
            total = total + weights.w_ent * le
    terms["total"] = float(total.value)
    return total, terms


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    max_steps: int = 5000
    eval_every: int = 100
    patience: int = 5
    max_halvings: int = 4
    divergence_factor: float = 10.0
    rotate: bool = True
    val_batches: int = 4
    checkpoint_every: int = 0  # evaluations between checkpoints; 0 keeps only best/final
    time_budget: float = 0.0  # seconds; 0 = unlimited
    restore_best: bool = True
    grad_clip: float = 0.0  # max global gradient norm; 0 disables


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_val: float = math.inf
    initial_val: float = math.nan
    steps: int = 0
    checkpoints: list = field(default_factory=list)
    stop_reason: str = ""


def _val_batches(dataset: PairDataset, cfg: TrainConfig, canonical, rotate, seed_stream):
    n = len(dataset)
    if n == 0:
        return []
    out = []
    order = seed_stream.generator.permutation(n)
    for b in range(cfg.val_batches):
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        if len(idx) == 0:
            break
        out.append(dataset.make_batch(idx, seed_stream.substream(b), canonical, rotate))
    return out


def acceptance_probe(flow, batch: Batch, targets: dict, rng) -> float:
    """Mean MH acceptance probability of one flow proposal per conditioning state."""
    rng = as_rng(rng)
    zp, zv = rng.normal(batch.start.shape), rng.normal(batch.start.shape)
    with dc.no_grad(), np.errstate(all="ignore"):
        log_r, _ = acceptance_terms(flow, BatchEnergy.for_batch(targets, batch.systems),
                                    _temperatures(targets, batch.systems), batch.start, batch.aux_start,
                                    batch.types, zp, zv)
    lr = np.where(np.isfinite(log_r.value), log_r.value, -np.inf)
    return float(np.mean(np.exp(np.minimum(0.0, lr))))


def spot_check(flow, batch: Batch, loss_value: float, rows=None, tol: float = 1e-8):
    """Recompute the likelihood loss of some rows from the numpy density and compare.

    ``loss_value`` is the per-row mean reported by :func:`loss_lik` for the
    full batch; only rows in ``rows`` (default: all) are recomputed, which is
    cheap enough to run on a small sample during training.
    """
    rows = np.arange(len(batch.start)) if rows is None else np.asarray(rows)
    with dc.no_grad():
        lp = log_density_batch(flow, batch).value
        ref = flow.log_density(batch.end[rows], batch.aux_end[rows], batch.start[rows], batch.types[rows])
    err = np.max(np.abs(lp[rows] - ref) / (1.0 + np.abs(ref)))
    if len(rows) == len(lp):
        err = max(err, abs(-lp.mean() - loss_value) / (1.0 + abs(loss_value)))
    if not err < tol:
        raise TrainingError(f"likelihood loss disagrees with flow density (relative error {err:.3g})")
    return float(err)


def evaluate(flow, batches, weights, targets, rng, detail: bool = False):
    """Mean weighted loss over fixed batches; with ``detail`` also the per-term means
    and, when targets are known, an acceptance probe."""
    rng = as_rng(rng)
    vals, terms = [], []
    with dc.no_grad():
        for k, b in enumerate(batches):
            t = total_loss(flow, b, weights, targets, rng.substream(k))[1]
            if detail and targets is not None:
                t["accept_prob"] = acceptance_probe(flow, b, targets, rng.substream(k, 1))
            vals.append(t["total"])
            terms.append(t)
    total = float(np.mean(vals)) if vals else math.nan
    if not detail:
        return total
    keys = set().union(*terms) if terms else set()
    return total, {k: float(np.mean([t[k] for t in terms if k in t])) for k in sorted(keys)}


def train(flow: ConditionalFlow, train_set: PairDataset, val_set: PairDataset, weights: LossWeights,
          cfg: TrainConfig, rng, targets: dict | None = None, run_dir=None, optimizer=None,
          stage: str = "") -> TrainResult:
    """Adam with plateau halving of the learning rate.

    Validation loss is evaluated every ``eval_every`` steps on fixed batches.
    After ``patience`` evaluations without improvement the learning rate is
    halved; training stops after ``max_halvings`` halvings, ``max_steps`` or
    the time budget. Divergence (val > initial + factor * max(|initial|, 1))
    aborts.
    """
    rng = as_rng(rng)
    canonical = flow.cfg.canonicalize
    rotate = cfg.rotate and canonical and flow.cfg.dimension > 1
    opt = optimizer or dc.Adam(flow.store, lr=cfg.lr)
    if optimizer is None:
        opt.lr = cfg.lr
    val_batches = _val_batches(val_set, cfg, canonical, rotate, rng.substream(1))
    val_rng = rng.substream(2)
    run_dir = Path(run_dir) if run_dir else None
    metrics = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(run_dir / "metrics.jsonl", "a")
    res = TrainResult()
    res.initial_val = res.best_val = evaluate(flow, val_batches, weights, targets, val_rng)
    best_state = flow.store.state_dict()
    bad, halvings, evals = 0, 0, 0
    t0 = time.perf_counter()
    step, epoch = 0, 0
    try:
        while step < cfg.max_steps:
            first_of_epoch = True
            for batch in train_set.batches(cfg.batch_size, rng.substream(3, epoch), canonical, rotate,
                                           drop_last=len(train_set) >= cfg.batch_size):
                flow.store.zero_grad()
                loss, terms = total_loss(flow, batch, weights, targets, rng.substream(4, step))
                if first_of_epoch and "lik" in terms and not terms.get("skipped"):
                    # about 1% of rows per epoch against the numpy density
                    k = max(1, len(batch.start) // 100)
                    spot_check(flow, batch, terms["lik"], rng.substream(5, epoch).generator.choice(
                        len(batch.start), k, replace=False))
                first_of_epoch = False
                dc.backward(loss)
                if cfg.grad_clip:
                    terms["grad_norm"] = dc.clip_grad_norm(flow.store, cfg.grad_clip)
                opt.step()
                step += 1
                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    val, vterms = evaluate(flow, val_batches, weights, targets, val_rng, detail=True)
                    evals += 1
                    rec = {"stage": stage, "step": step, "lr": opt.lr, "val": val,
                           **{f"val_{k}": v for k, v in vterms.items() if k != "total"},
                           **{f"train_{k}": v for k, v in terms.items()}}
                    res.history.append(rec)
                    if metrics:
                        metrics.write(json.dumps(rec) + "\n")
                        metrics.flush()
                    log.info("step %d val %.4f lr %.2e", step, val, opt.lr)
                    limit = res.initial_val + cfg.divergence_factor * max(abs(res.initial_val), 1.0)
                    if not np.isfinite(val) or val > limit:
                        raise TrainingDiverged(f"validation loss {val:.4g} exceeded {limit:.4g} at step {step} "
                                               f"(initial {res.initial_val:.4g}, lr {opt.lr:.2e})")
                    if val < res.best_val - 1e-9:
                        res.best_val = val
                        best_state = flow.store.state_dict()
                        bad = 0
                    else:
                        bad += 1
                        if bad >= cfg.patience:
                            halvings += 1
                            bad = 0
                            opt.lr *= 0.5
                            if halvings > cfg.max_halvings:
                                res.stop_reason = "plateau"
                    if run_dir and cfg.checkpoint_every and evals % cfg.checkpoint_every == 0:
                        path = run_dir / f"ckpt_{stage}_{step:07d}.wmc"
                        digest = flow.save(path, {"step": step, "val": val, "stage": stage}, opt)
                        res.checkpoints.append((str(path), digest))
                    if cfg.time_budget and time.perf_counter() - t0 > cfg.time_budget:
                        res.stop_reason = "time"
                if res.stop_reason or step >= cfg.max_steps:
                    break
            epoch += 1
            if res.stop_reason:
                break
        if not res.stop_reason:
            res.stop_reason = "max_steps"
    finally:
        if metrics:
            metrics.close()
    res.steps = step
    if cfg.restore_best:
        flow.store.load_state_dict(best_state)
    if run_dir:
        path = run_dir / f"ckpt_{stage or 'final'}_latest.wmc"
        digest = flow.save(path, {"step": step, "val": res.best_val, "stage": stage}, opt)
        res.checkpoints.append((str(path), digest))
    return res
