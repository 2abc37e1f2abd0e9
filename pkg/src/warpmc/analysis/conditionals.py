"""Compare a learned conditional distribution with a dynamics oracle."""
from __future__ import annotations

import numpy as np
from scipy import stats

from ..core import as_rng


def _draw(model, x_start, n, rng, types):
    if callable(model) and not hasattr(model, "sample"):
        return np.asarray(model(x_start, n, rng))
    xp, _, _ = model.sample(x_start, types, rng, n)
    return xp


def _ks(a, b):
    r = stats.ks_2samp(np.ravel(a), np.ravel(b))
    return {"ks": float(r.statistic), "p": float(r.pvalue)}


def compare_conditionals(model, oracle, x_start, n_samples: int, rng, potential=None, system=None, types=None,
                         projection=None, alpha: float = 0.01) -> dict:
    """Draw from the model and from the oracle given the same start and compare.

    ``model`` is a proposal object (``sample``) or a callable
    ``(x_start, n, rng) -> (n, N, d)``; ``oracle`` is such a callable, usually
    wrapping ``conditional_ensemble``. Reports KS statistics of displacements,
    of an optional projection, of potential energies, and of bond lengths per
    bond for bonded systems.
    """
    rng = as_rng(rng)
    x_start = np.asarray(x_start, dtype=np.float64)
    a = _draw(model, x_start, n_samples, rng.substream(0), types)
    b = _draw(oracle, x_start, n_samples, rng.substream(1), types)
    report = {"n_samples": int(n_samples), "displacement": _ks(a - x_start, b - x_start)}
    if projection is not None:
        report["projection"] = _ks(projection(a), projection(b))
    if potential is not None:
        ea, eb = potential.energy(a), potential.energy(b)
        report["energy"] = _ks(ea, eb)
        report["energy"].update({"mean_model": float(np.mean(ea)), "mean_oracle": float(np.mean(eb))})
        report["energy_mismatch"] = bool(report["energy"]["p"] < alpha)
    if system is not None and system.bonds:
        bonds = []
        for i, j, _, r0 in system.bonds:
            la = np.linalg.norm(a[:, i] - a[:, j], axis=-1)
            lb = np.linalg.norm(b[:, i] - b[:, j], axis=-1)
            bonds.append({"bond": [i, j], "r0": r0, **_ks(la, lb)})
        report["bonds"] = bonds
        report["max_bond_ks"] = max(x["ks"] for x in bonds)
    report["samples"] = {"model": a, "oracle": b}
    return report
