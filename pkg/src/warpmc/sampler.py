"""Batched Metropolis-Hastings with flow proposals, and biased exploration.

A proposal object needs two methods (the conditional flow has both)::

    sample(cond, types, rng, n) -> (x^p, x^v, log p)      cond (C, N, d) -> (C, n, N, d)
    log_density(x^p, x^v, cond, types) -> log p

Per MCMC iteration the random draws happen in a fixed order: proposal
latents, then the fresh auxiliaries for the current state, then the
uniforms. With one proposal per iteration this is the textbook MH loop with a
Gibbs refresh of the auxiliaries.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import SystemSpec, as_rng, dihedral_angle
from .energy import AugmentedTarget, Potential, gaussian_log_pdf
from .fileio import read_container, write_container

log = logging.getLogger(__name__)

CHAIN_FORMAT_VERSION = 1


class SamplerAborted(RuntimeError):
    def __init__(self, msg, chain):
        super().__init__(msg)
        self.chain = chain


@dataclass
class Chain:
    """Sampler output for one or more independent chains.

    ``states`` has shape (C, M, N, d) and excludes the start ``x0`` (C, N, d).
    ``accepted[c, m]`` marks states that are newly accepted proposals;
    ``batch_index`` is the proposal index inside its batch (-1 for copies).
    ``t_sampling`` is the wall-clock time of the sampling loop only.
    """

    x0: np.ndarray
    states: np.ndarray
    accepted: np.ndarray
    batch_index: np.ndarray
    energies: np.ndarray
    t_sampling: float
    n_proposals: int = 0
    n_nonfinite: int = 0
    n_constraint_rejects: int = 0
    kind: str = "mcmc"
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.states.shape[0]

    @property
    def length(self) -> int:
        return self.states.shape[1]

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.sum())

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / max(self.n_proposals, 1)

    def single(self, c: int = 0) -> np.ndarray:
        return self.states[c]

    def save(self, path, system: SystemSpec | None = None) -> str:
        meta = dict(self.meta)
        meta.update({
            "format_version": CHAIN_FORMAT_VERSION,
            "kind": self.kind,
            "system": None if system is None else system.to_dict(),
            "n_chains": self.n_chains,
            "M": self.length,
            "t_sampling": self.t_sampling,
            "t_sampling_excludes_model_load": True,
            "n_proposals": self.n_proposals,
            "n_accepted": self.n_accepted,
            "n_nonfinite": self.n_nonfinite,
            "n_constraint_rejects": self.n_constraint_rejects,
        })
        arrays = {"x0": self.x0, "frames": self.states, "accepted": self.accepted,
                  "batch_index": self.batch_index, "energies": self.energies}
        return write_container(path, "chain", meta, arrays)

    @classmethod
    def load(cls, path) -> "Chain":
        meta, a = read_container(path, "chain")
        if meta.get("format_version") != CHAIN_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported chain format_version")
        known = {"format_version", "kind", "n_chains", "M", "t_sampling", "t_sampling_excludes_model_load",
                 "n_proposals", "n_accepted", "n_nonfinite", "n_constraint_rejects"}
        extra = {k: v for k, v in meta.items() if k not in known}
        return cls(a["x0"], a["frames"], a["accepted"].astype(bool), a["batch_index"], a["energies"],
                   meta["t_sampling"], meta["n_proposals"], meta["n_nonfinite"], meta["n_constraint_rejects"],
                   meta["kind"], extra)


# acceptance
def mh_log_alpha(target: AugmentedTarget, flow, X, Xt, types) -> np.ndarray:
    """min(0, log r); non-finite ratios map to -inf (always rejected)."""
    from .training import r_theta

    with np.errstate(all="ignore"):
        lr = np.asarray(r_theta(flow, target, X, Xt, types), dtype=np.float64)
    return np.where(np.isfinite(lr), np.minimum(0.0, lr), -np.inf)


def gibbs_refresh_aux(state, rng):
    """Fresh standard-normal auxiliaries; positions untouched."""
    from .core import State

    return State(state.positions, as_rng(rng).normal(state.positions.shape), state.system)


# constraints
def always_pass(previous, proposal):
    return np.ones(np.shape(proposal)[:-2], dtype=bool)


class DihedralSignConstraint:
    """Rejects proposals that flip the sign of a chosen dihedral.

    A stand-in for chirality checks: mirroring a configuration flips the sign.
    """

    def __init__(self, i, j, k, l):
        self.atoms = (i, j, k, l)

    def __call__(self, previous, proposal):
        a = dihedral_angle(previous, *self.atoms)
        b = dihedral_angle(proposal, *self.atoms)
        return np.sign(a) == np.sign(b)


def constraint_hook(constraint, previous, proposal) -> np.ndarray:
    if constraint is None:
        return always_pass(previous, proposal)
    return np.asarray(constraint(previous, proposal), dtype=bool)


def _as_batch(x0):
    x0 = np.asarray(x0, dtype=np.float64)
    return (x0[None], True) if x0.ndim == 2 else (x0, False)


def sample_mcmc(flow, target: AugmentedTarget, x0, M: int, B: int, rng, constraint=None, types=None,
                progress_every: int = 0) -> Chain:
    """MH-corrected sampling with B proposals per iteration (first-accepted rule).

    ``x0`` is (N, d) for one chain or (C, N, d) for C independent chains
    advanced together. Each of the B proposals pairs with its own fresh
    auxiliary draw for the current state. If proposal ``a`` is the first
    accepted one, the chain emits a-1 copies of the current state and then the
    proposal; if none is accepted it emits B copies. Output is truncated to M.
    """
    if M < 1 or B < 1:
        raise ValueError("need M >= 1 and B >= 1")
    rng = as_rng(rng)
    X0, _ = _as_batch(x0)
    C, N, d = X0.shape
    types = np.zeros(N, dtype=np.int64) if types is None else np.asarray(types, dtype=np.int64)
    T = target.T
    pot = target.potential
    states = np.empty((C, M, N, d))
    energies = np.empty((C, M))
    accepted = np.zeros((C, M), dtype=bool)
    bidx = np.full((C, M), -1, dtype=np.int64)
    cur = X0.copy()
    cur_u = np.asarray(pot.energy(cur), dtype=np.float64).reshape(C)
    filled = np.zeros(C, dtype=np.int64)
    n_prop = n_bad = n_con = 0

    def chain_so_far():
        return Chain(X0.copy(), states.copy(), accepted.copy(), bidx.copy(), energies.copy(),
                     time.perf_counter() - t0, n_prop, n_bad, n_con)

    t0 = time.perf_counter()
    it = 0
    while True:
        active = np.flatnonzero(filled < M)
        if len(active) == 0:
            break
        try:
            cond = cur[active]
            yp, yv, logp_fwd = flow.sample(cond, types, rng, B)  # (A, B, N, d)
            eps = rng.normal(yp.shape)
            u = rng.uniform((len(active), B))
            with np.errstate(all="ignore"):
                cond_b = np.broadcast_to(cond[:, None], yp.shape)
                logp_rev = flow.log_density(cond_b, eps, yp, types)
                u_new = np.asarray(pot.energy(yp), dtype=np.float64)
                log_r = (-u_new / T + gaussian_log_pdf(yv) + logp_rev
                         - (-cur_u[active][:, None] / T + gaussian_log_pdf(eps)) - logp_fwd)
        except Exception as exc:  # flow or energy failure: keep what we have
            raise SamplerAborted(f"sampling aborted at iteration {it}: {exc}", chain_so_far()) from exc
        finite = np.isfinite(log_r)
        n_bad += int((~finite).sum())
        log_alpha = np.where(finite, np.minimum(0.0, log_r), -np.inf)
        ok = constraint_hook(constraint, cond_b, yp)
        n_con += int((~ok).sum())
        log_alpha = np.where(ok, log_alpha, -np.inf)
        with np.errstate(divide="ignore"):
            acc = np.log(u) < log_alpha
        for row, c in enumerate(active):
            hits = np.flatnonzero(acc[row])
            f = filled[c]
            if len(hits):
                a = int(hits[0])
                n_prop += a + 1
                k = min(a, M - f)
                states[c, f:f + k] = cur[c]
                energies[c, f:f + k] = cur_u[c]
                f += k
                if f < M:
                    cur[c] = yp[row, a]
                    cur_u[c] = u_new[row, a]
                    states[c, f] = cur[c]
                    energies[c, f] = cur_u[c]
                    accepted[c, f] = True
                    bidx[c, f] = a
                    f += 1
            else:
                n_prop += B
                k = min(B, M - f)
                states[c, f:f + k] = cur[c]
                energies[c, f:f + k] = cur_u[c]
                f += k
            filled[c] = f
        it += 1
        if progress_every and it % progress_every == 0:
            log.info("iteration %d, filled %d/%d", it, int(filled.min()), M)
    return Chain(X0, states, accepted, bidx, energies, time.perf_counter() - t0, n_prop, n_bad, n_con,
                 meta={"B": B, "seed": rng.seed})


def explore(flow, potential: Potential, x0, M: int, du_max: float, rng, constraint=None, types=None,
            n_chains: int = 100) -> Chain:
    """Accept any proposal raising the energy by less than ``du_max``; no MH ratio.

    Runs ``n_chains`` independent chains from the same start, one proposal
    per chain per step. Biased, meant for finding new states quickly.
    """
    if M < 1:
        raise ValueError("need M >= 1")
    rng = as_rng(rng)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = np.repeat(x0[None], n_chains, axis=0)
    C, N, d = x0.shape
    types = np.zeros(N, dtype=np.int64) if types is None else np.asarray(types, dtype=np.int64)
    states = np.empty((C, M, N, d))
    energies = np.empty((C, M))
    accepted = np.zeros((C, M), dtype=bool)
    cur = x0.copy()
    cur_u = np.asarray(potential.energy(cur), dtype=np.float64).reshape(C)
    n_bad = n_con = 0
    t0 = time.perf_counter()
    for m in range(M):
        try:
            yp, _, _ = flow.sample(cur, types, rng, 1)
            yp = yp[:, 0]
            with np.errstate(all="ignore"):
                u_new = np.asarray(potential.energy(yp), dtype=np.float64)
        except Exception as exc:
            part = Chain(x0, states[:, :m].copy(), accepted[:, :m].copy(), np.full((C, m), -1), energies[:, :m].copy(),
                         time.perf_counter() - t0, m * C, n_bad, n_con, kind="explore")
            raise SamplerAborted(f"exploration aborted at step {m}: {exc}", part) from exc
        finite = np.isfinite(u_new)
        n_bad += int((~finite).sum())
        with np.errstate(invalid="ignore"):
            ok = finite & (u_new - cur_u < du_max)
        passed = constraint_hook(constraint, cur, yp)
        n_con += int((ok & ~passed).sum())
        ok &= passed
        cur[ok] = yp[ok]
        cur_u[ok] = u_new[ok]
        states[:, m] = cur
        energies[:, m] = cur_u
        accepted[:, m] = ok
    return Chain(x0, states, accepted, np.where(accepted, 0, -1), energies, time.perf_counter() - t0,
                 M * C, n_bad, n_con, kind="explore", meta={"du_max": du_max, "seed": rng.seed})


class IdentityProposal:
    """Gaussian random walk: x' = x + z, aux' = z'. Same law as an all-zero flow."""

    def __init__(self, scale: float = 1.0):
        self.scale = float(scale)

    def sample(self, cond, types, rng, n):
        cond = np.asarray(cond, dtype=np.float64)
        shape = cond.shape[:-2] + (n,) + cond.shape[-2:]
        rng = as_rng(rng)
        zp = rng.normal(shape)
        zv = rng.normal(shape)
        xp = cond[..., None, :, :] + self.scale * zp
        return xp, zv, self.log_density(xp, zv, cond[..., None, :, :], types)

    def log_density(self, xp, xv, cond, types):
        dz = (np.asarray(xp) - np.asarray(cond)) / self.scale
        k = dz.shape[-2] * dz.shape[-1]
        return gaussian_log_pdf(dz) - k * np.log(self.scale) + gaussian_log_pdf(xv)
