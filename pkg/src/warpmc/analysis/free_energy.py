"""Free-energy profiles from samples along one coordinate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FreeEnergyProfile:
    edges: np.ndarray
    centers: np.ndarray
    values: np.ndarray  # NaN marks empty bins
    counts: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.counts > 0


def free_energy_profile(samples, n_bins: int, temperature: float, range=None, weights=None) -> FreeEnergyProfile:
    """-T log(histogram density), shifted so its minimum is 0."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    counts, edges = np.histogram(x, bins=n_bins, range=range, weights=weights)
    if counts.sum() <= 0:
        raise ValueError("no samples fall into any bin")
    dens = counts / (counts.sum() * np.diff(edges))
    with np.errstate(divide="ignore"):
        f = -temperature * np.log(dens)
    f[counts <= 0] = np.nan
    f -= np.nanmin(f)
    return FreeEnergyProfile(edges, 0.5 * (edges[1:] + edges[:-1]), f, counts)
