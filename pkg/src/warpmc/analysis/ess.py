"""Autocorrelation, effective sample size and speed-up factors."""
from __future__ import annotations

import warnings

import numpy as np


class EssError(ValueError):
    pass


def autocorrelation(series, max_lag: int, mean: float | None = None, var: float | None = None) -> np.ndarray:
    """rho_1..rho_max_lag with the biased (divide by M) estimator.

    ``mean`` and ``var`` default to the sample values; passing equilibrium
    values measures correlation relative to a reference distribution.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    M = len(x)
    if M <= max_lag:
        raise EssError(f"series length {M} must exceed max_lag {max_lag}")
    mu = x.mean() if mean is None else float(mean)
    xc = x - mu
    v = float(np.mean(xc * xc)) if var is None else float(var)
    if not v > 0:
        raise EssError("series has zero variance")
    n = 1 << int(np.ceil(np.log2(2 * M)))
    f = np.fft.rfft(xc, n)
    acov = np.fft.irfft(f * np.conj(f), n)[: max_lag + 1] / M
    return acov[1:] / v


def _geyer_sum(rho):
    """Initial positive (and monotone) sequence sum of rho_1, rho_2, ... ."""
    r = np.concatenate([[1.0], rho])
    npairs = len(r) // 2
    gam = r[: 2 * npairs].reshape(npairs, 2).sum(axis=1)
    pos = np.flatnonzero(gam <= 0)
    k = pos[0] if len(pos) else npairs
    gam = np.minimum.accumulate(gam[:k]) if k else gam[:0]
    return (2.0 * gam.sum() - 1.0 - 1.0) / 2.0  # sum_{t>=1} rho_t


def _threshold_sum(rho, threshold):
    cut = np.flatnonzero((rho < threshold) | (rho < 0))
    k = cut[0] if len(cut) else len(rho)
    return rho[:k].sum()


def integrated_time(series, method: str = "geyer", threshold: float = 0.05, max_lag: int | None = None,
                    mean=None, var=None) -> float:
    """1 + 2 sum rho_t with the chosen truncation."""
    x = np.asarray(series, dtype=np.float64).ravel()
    M = len(x)
    L = M - 1 if max_lag is None else min(max_lag, M - 1)
    rho = autocorrelation(x, L, mean, var)
    if method == "geyer":
        s = _geyer_sum(rho)
    elif method == "threshold":
        s = _threshold_sum(rho, threshold)
    else:
        raise ValueError(f"unknown truncation method {method!r}")
    tau = 1.0 + 2.0 * s
    if tau <= 0:
        warnings.warn("non-positive integrated time; truncating at first negative autocorrelation", stacklevel=2)
        neg = np.flatnonzero(rho < 0)
        tau = 1.0 + 2.0 * rho[: neg[0] if len(neg) else len(rho)].sum()
        if tau <= 0:
            tau = 1.0
    return float(tau)


def effective_sample_size(series, **kw) -> float:
    x = np.asarray(series, dtype=np.float64).ravel()
    return len(x) / integrated_time(x, **kw)


def ess_per_second(series, t_sampling: float, **kw):
    """Returns (ESS per second, ESS)."""
    if not t_sampling > 0:
        raise EssError("t_sampling must be positive")
    m_eff = effective_sample_size(series, **kw)
    return m_eff / t_sampling, m_eff


def speedup_factor(model_features, t_model: float, md_features, t_md: float, tica, component: int = 0,
                   reference_normalised: bool = True, **kw) -> float:
    """Ratio of ESS/s on one TIC of a model chain over an MD chain.

    Both feature series are projected with the same TICA model, fit on the
    MD reference. With ``reference_normalised`` the autocorrelations use the
    reference mean 0 and variance 1 of the TIC, so a chain stuck in one
    basin is not credited with within-basin decorrelation.
    """
    a = tica.transform(model_features)[:, component]
    b = tica.transform(md_features)[:, component]
    if reference_normalised:
        kw = {"mean": 0.0, "var": 1.0, **kw}
    try:
        ra, _ = ess_per_second(a, t_model, **kw)
        rb, _ = ess_per_second(b, t_md, **kw)
    except EssError as exc:
        raise EssError(f"ESS undefined: {exc}") from exc
    if not (np.isfinite(ra) and np.isfinite(rb) and rb > 0):
        raise EssError("ESS undefined")
    return ra / rb
