"""Figures: TIC scatter, free-energy curves, energy histograms, autocorrelations."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def projection_scatter(path, projections: dict, max_points: int = 20000):
    fig, axes = plt.subplots(1, len(projections), figsize=(4 * len(projections), 4), squeeze=False)
    for ax, (name, y) in zip(axes[0], projections.items()):
        y = np.asarray(y)
        step = max(1, len(y) // max_points)
        if y.shape[1] > 1:
            ax.hexbin(y[::step, 0], y[::step, 1], gridsize=50, bins="log", mincnt=1)
            ax.set_ylabel("TIC 1")
        else:
            ax.hist(y[::step, 0], bins=80, density=True)
        ax.set_xlabel("TIC 0")
        ax.set_title(name)
    return _save(fig, path)


def free_energy_curves(path, profiles: dict, xlabel="TIC 0"):
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, p in profiles.items():
        ax.plot(p.centers, p.values, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("free energy / T")
    ax.legend()
    return _save(fig, path)


def energy_histograms(path, energies: dict):
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, e in energies.items():
        ax.hist(np.ravel(e), bins=60, density=True, histtype="step", label=name)
    ax.set_xlabel("potential energy")
    ax.legend()
    return _save(fig, path)


def autocorrelation_curves(path, curves: dict):
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, (lags, rho) in curves.items():
        ax.plot(lags, rho, label=name)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xlabel("lag")
    ax.set_ylabel("autocorrelation")
    ax.legend()
    return _save(fig, path)
