"""Time-lagged independent component analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..core import pairwise_distances

REGULARIZATION = 1e-8


class TicaError(ValueError):
    pass


@dataclass
class TicaModel:
    lag: int
    mean: np.ndarray
    components: np.ndarray  # (F, F) columns sorted by decreasing eigenvalue
    eigenvalues: np.ndarray

    def transform(self, features, dim: int | None = None) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        comp = self.components if dim is None else self.components[:, :dim]
        return (x - self.mean) @ comp

    def to_dict(self):
        return {"lag": self.lag, "mean": self.mean.tolist(), "components": self.components.tolist(),
                "eigenvalues": self.eigenvalues.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["lag"]), np.array(d["mean"]), np.array(d["components"]), np.array(d["eigenvalues"]))


def _as_list(features):
    if isinstance(features, np.ndarray) and features.ndim == 2:
        return [features]
    return [np.asarray(f, dtype=np.float64) for f in features]


def tica_fit(features, lag: int) -> TicaModel:
    """Fit TICA to one (T, F) feature series or a list of them.

    C0 uses all frames; C_tau averages the lagged products in both time
    directions. Solves C_tau v = lambda (C0 + eps I) v, so projections have
    unit variance; eigenvalues are clipped to [-1, 1].
    """
    series = _as_list(features)
    if lag < 0:
        raise TicaError("lag must be >= 0")
    if not series or all(len(s) <= lag + 1 for s in series):
        raise TicaError(f"need more than lag + 1 = {lag + 1} frames")
    F = series[0].shape[1]
    allx = np.concatenate(series)
    mean = allx.mean(axis=0)
    xc = allx - mean
    c0 = xc.T @ xc / len(xc)
    ct = np.zeros((F, F))
    n = 0
    for s in series:
        if len(s) <= lag:
            continue
        a = s[: len(s) - lag] - mean
        b = s[lag:] - mean
        ct += a.T @ b + b.T @ a
        n += 2 * len(a)
    ct /= n
    ev0 = np.linalg.eigvalsh(c0)
    if ev0[-1] <= 0:
        raise TicaError("features have zero variance")
    if ev0[0] <= 1e-12 * ev0[-1]:
        raise TicaError("instantaneous covariance is rank deficient; prune redundant features")
    w, v = linalg.eigh(ct, c0 + REGULARIZATION * np.eye(F))
    order = np.argsort(w)[::-1]
    w, v = np.clip(w[order], -1.0, 1.0), v[:, order]
    # deterministic sign: largest loading positive
    signs = np.sign(v[np.argmax(np.abs(v), axis=0), np.arange(F)])
    v = v * np.where(signs == 0, 1.0, signs)
    return TicaModel(int(lag), mean, v, w)


def chain_features(positions, system=None) -> np.ndarray:
    """Rotation/translation-invariant descriptors for bonded systems
    (pairwise distances); raw coordinates otherwise. Returns (T, F)."""
    x = np.asarray(positions, dtype=np.float64)
    if system is not None and system.bonds and x.shape[-2] > 1:
        return pairwise_distances(x).reshape(-1, x.shape[-2] * (x.shape[-2] - 1) // 2)
    return x.reshape(-1, x.shape[-2] * x.shape[-1])
