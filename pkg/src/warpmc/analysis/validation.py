"""Check whether states found only by exploration are genuinely metastable.

Exploration frames far (in TIC space) from every MD reference frame are
clustered. Short MD ensembles are started from frames of each cluster; a
cluster is validated when at least ``stay_threshold`` of the final frames
remain within the cluster radius of the cluster centre.
"""
from __future__ import annotations

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial import cKDTree

from ..core import as_rng
from ..dynamics import conditional_ensemble


def _fit_projector(tica, dim):
    return lambda feats: tica.transform(feats, dim)


def validate_new_states(md_positions, explore_positions, system, potential, params, featurize, tica,
                        rng, dim: int = 2, radius: float = 1.0, stay_threshold: float = 0.5,
                        horizon_steps: int = 200, n_replicas: int = 64, n_seeds: int = 4,
                        max_candidates: int = 2000, min_cluster_size: int = 5) -> dict:
    """Validation report for exploration-only regions.

    ``featurize`` maps (T, N, d) positions to features; ``tica`` projects
    them. Distances and the cluster radius are in projected (whitened) units.
    The fraction of ensemble end points near known MD states is reported as
    well, but does not decide validation.
    """
    rng = as_rng(rng)
    md = np.asarray(md_positions, dtype=np.float64).reshape((-1,) + np.shape(md_positions)[-2:])
    ex = np.asarray(explore_positions, dtype=np.float64).reshape((-1,) + np.shape(explore_positions)[-2:])
    dim = min(dim, tica.components.shape[1])
    proj = lambda x: np.atleast_2d(tica.transform(featurize(x), dim)).reshape(len(x), dim)  # noqa: E731
    md_y, ex_y = proj(md), proj(ex)
    tree = cKDTree(md_y)
    dist, _ = tree.query(ex_y)
    far = np.flatnonzero(dist > radius)
    report = {"radius": radius, "stay_threshold": stay_threshold, "horizon_steps": horizon_steps,
              "n_replicas": n_replicas, "n_exploration_only_frames": int(len(far)), "candidates": []}
    if len(far) == 0:
        report["status"] = "none found"
        return report
    if len(far) > max_candidates:
        far = np.sort(rng.substream(0).generator.choice(far, max_candidates, replace=False))
    pts = ex_y[far]
    labels = np.ones(len(pts), dtype=int) if len(pts) == 1 else \
        fcluster(linkage(pts, method="single"), t=radius, criterion="distance")
    k = 0
    for lab in np.unique(labels):
        members = far[labels == lab]
        if len(members) < min_cluster_size:
            continue
        center = ex_y[members].mean(axis=0)
        order = members[np.argsort(np.linalg.norm(ex_y[members] - center, axis=1))]
        seeds = order[:n_seeds]
        finals = []
        for s_i, s in enumerate(seeds):
            finals.append(conditional_ensemble(system, potential, params, ex[s], horizon_steps,
                                               n_replicas, rng.substream(1, k, s_i)))
        finals = np.concatenate(finals)
        fy = proj(finals)
        stay = float(np.mean(np.linalg.norm(fy - center, axis=1) <= radius))
        known = float(np.mean(tree.query(fy)[0] <= radius))
        report["candidates"].append({
            "center": center.tolist(), "size": int(len(members)), "stay_fraction": stay,
            "known_fraction": known, "validated": stay >= stay_threshold,
            "seed_frames": seeds.tolist(),
        })
        k += 1
    report["status"] = "candidates" if report["candidates"] else "none found"
    report["n_validated"] = sum(c["validated"] for c in report["candidates"])
    return report
