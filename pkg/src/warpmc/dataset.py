"""Training pairs (x(t), x(t+tau)) with online auxiliaries and augmentation.

Datasets hold positions only. Auxiliaries and rotations are drawn afresh each
time a batch is produced.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import RngStream, State, SystemSpec, as_rng, center_of_geometry, random_rotation
from .dynamics import Trajectory
from .fileio import file_sha256, read_container, write_container

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class SplitError(ValueError):
    pass


class Pairs(NamedTuple):
    indices: np.ndarray  # frame index of the earlier endpoint
    start: np.ndarray  # (K, N, d)
    end: np.ndarray  # (K, N, d)


def extract_pairs(trajectory: Trajectory, max_pairs: int, rng) -> Pairs:
    """Sample consecutive stored frames (i, i+1) uniformly without replacement."""
    frames = trajectory.frames
    if len(frames) < 2:
        raise ValueError("trajectory needs at least 2 stored frames")
    available = len(frames) - 1
    if max_pairs > available:
        warnings.warn(f"requested {max_pairs} pairs, only {available} available; returning all", stacklevel=2)
        max_pairs = available
    idx = as_rng(rng).generator.choice(available, size=max_pairs, replace=False) if max_pairs else np.zeros(0, int)
    idx = np.asarray(idx, dtype=np.int64)
    return Pairs(idx, frames[idx].copy(), frames[idx + 1].copy())


def replica_pairs(frames, max_pairs: int, rng) -> Pairs:
    """Pairs from independent replicas, frames (R, T, N, d); never across replicas.

    ``indices`` are flat positions r * (T - 1) + i.
    """
    frames = np.asarray(frames, dtype=np.float64)
    R, T = frames.shape[:2]
    if T < 2:
        raise ValueError("replicas need at least 2 stored frames")
    available = R * (T - 1)
    if max_pairs > available:
        warnings.warn(f"requested {max_pairs} pairs, only {available} available; returning all", stacklevel=2)
        max_pairs = available
    idx = np.asarray(as_rng(rng).generator.choice(available, size=max_pairs, replace=False), dtype=np.int64)
    r, i = np.divmod(idx, T - 1)
    return Pairs(idx, frames[r, i].copy(), frames[r, i + 1].copy())


def draw_auxiliaries(shape, rng) -> np.ndarray:
    return as_rng(rng).normal(shape)


def attach_auxiliaries(pair, rng, system: SystemSpec):
    """States at t and t+tau with independent standard-normal auxiliaries."""
    start, end = (np.asarray(p, dtype=np.float64) for p in pair)
    rng = as_rng(rng)
    v0 = draw_auxiliaries(start.shape, rng)
    v1 = draw_auxiliaries(end.shape, rng)
    return State(start, v0, system), State(end, v1, system)


def canonicalize(conditioning, target):
    """Shift both arrays by minus the centre of the conditioning frame; batched."""
    c = np.asarray(conditioning, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if c.shape[-2] != t.shape[-2]:
        raise ValueError("conditioning and target must have the same number of atoms")
    shift = center_of_geometry(c)[..., None, :]
    return c - shift, t - shift


def rotation_augment(pair, rng, rotation=None):
    """Apply one random rotation (per pair, if batched) to both endpoints.

    Rotation is about the origin, so canonicalised pairs stay centred.
    """
    a, b = (np.asarray(p, dtype=np.float64) for p in pair)
    d = a.shape[-1]
    if d == 1:
        warnings.warn("rotation augmentation is a no-op for d=1", stacklevel=2)
        return a.copy(), b.copy()
    if rotation is None:
        rng = as_rng(rng)
        batch = a.shape[:-2]
        rotation = np.stack([random_rotation(d, rng) for _ in range(int(np.prod(batch)))]).reshape(batch + (d, d))
    R = np.asarray(rotation, dtype=np.float64)
    rot = lambda x: np.einsum("...ij,...nj->...ni", R, x)  # noqa: E731
    return rot(a), rot(b)


def check_split(train_names, test_names):
    overlap = set(train_names) & set(test_names)
    if overlap:
        raise SplitError(f"systems appear in both train and test: {sorted(overlap)}")


@dataclass
class PairGroup:
    """All pairs drawn from one system under one split."""

    system: SystemSpec
    start: np.ndarray
    end: np.ndarray
    spacing: int
    split: str
    source: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if self.start.shape != self.end.shape:
            raise ValueError("pair endpoints must have equal shapes")

    def __len__(self):
        return len(self.start)


class Batch(NamedTuple):
    types: np.ndarray  # (B, N)
    start: np.ndarray
    end: np.ndarray
    aux_start: np.ndarray
    aux_end: np.ndarray
    systems: tuple


class PairDataset:
    """Groups of pairs per (system, split). Batches mix systems with equal N."""

    def __init__(self, groups: list[PairGroup]):
        self.groups = list(groups)
        check_split([g.system.name for g in self.groups if g.split == "train"],
                    [g.system.name for g in self.groups if g.split == "test"])

    def split(self, tag: str) -> "PairDataset":
        out = PairDataset.__new__(PairDataset)
        out.groups = [g for g in self.groups if g.split == tag]
        return out

    def __len__(self):
        return sum(len(g) for g in self.groups)

    @property
    def systems(self):
        return [g.system for g in self.groups]

    def arrays(self):
        """Concatenate pairs of all groups; all groups must share N and d."""
        shapes = {g.start.shape[1:] for g in self.groups}
        if len(shapes) != 1:
            raise ValueError(f"groups have differing (N, d): {sorted(shapes)}")
        types = np.concatenate([np.broadcast_to(g.system.types_array, (len(g), g.system.n_atoms))
                                for g in self.groups])
        start = np.concatenate([g.start for g in self.groups])
        end = np.concatenate([g.end for g in self.groups])
        owner = np.concatenate([np.full(len(g), k) for k, g in enumerate(self.groups)])
        return types, start, end, owner

    def make_batch(self, index, rng, canonical: bool = True, rotate: bool = False) -> Batch:
        types, start, end, owner = self._cache()
        rng = as_rng(rng)
        x0, x1 = start[index], end[index]
        if canonical:
            x0, x1 = canonicalize(x0, x1)
        if rotate and x0.shape[-1] > 1:
            x0, x1 = rotation_augment((x0, x1), rng.substream(1))
        aux = rng.substream(0)
        return Batch(types[index], x0, x1, aux.normal(x0.shape), aux.normal(x1.shape),
                     tuple(self.groups[k].system.name for k in owner[index]))

    def batches(self, batch_size: int, rng, canonical=True, rotate=False, drop_last=False):
        """One shuffled epoch of batches; substreams keep batches independent."""
        rng = as_rng(rng)
        n = len(self)
        order = rng.generator.permutation(n)
        for b, lo in enumerate(range(0, n, batch_size)):
            idx = order[lo:lo + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.make_batch(idx, rng.substream(b), canonical, rotate)

    def _cache(self):
        if getattr(self, "_arrays", None) is None:
            self._arrays = self.arrays()
        return self._arrays

    # Manifest: JSON index plus one container per group.
    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, g in enumerate(self.groups):
            fname = f"pairs_{k:03d}_{g.split}_{g.system.name}.wmc"
            digest = write_container(directory / fname, "pairs",
                                     {"system": g.system.to_dict(), "spacing": g.spacing, "split": g.split},
                                     {"start": g.start, "end": g.end})
            entries.append({"file": fname, "sha256": digest, "system": g.system.name, "split": g.split,
                            "pairs": len(g), "spacing": g.spacing, "source": g.source})
        path = directory / "manifest.json"
        path.write_text(json.dumps({"format_version": MANIFEST_VERSION, "groups": entries}, indent=2))
        return path

    @classmethod
    def load(cls, manifest) -> "PairDataset":
        manifest = Path(manifest)
        if manifest.is_dir():
            manifest = manifest / "manifest.json"
        data = json.loads(manifest.read_text())
        if data.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"{manifest}: unsupported manifest format_version")
        groups = []
        for e in data["groups"]:
            path = manifest.parent / e["file"]
            if file_sha256(path) != e["sha256"]:
                raise ValueError(f"{path}: hash mismatch with manifest")
            meta, arr = read_container(path, "pairs")
            groups.append(PairGroup(SystemSpec.from_dict(meta["system"]), arr["start"], arr["end"],
                                    meta["spacing"], meta["split"], e.get("source", "")))
        return cls(groups)


def pairs_from_trajectories(items, max_pairs: int, rng, burn_in_frames: int = 0) -> PairDataset:
    """``items`` is a list of (Trajectory, split, source label)."""
    rng = as_rng(rng)
    groups = []
    for k, (traj, split, source) in enumerate(items):
        if burn_in_frames:
            traj = Trajectory(traj.frames[burn_in_frames:], traj.spacing, traj.params, traj.system)
        p = extract_pairs(traj, max_pairs, rng.substream(k))
        groups.append(PairGroup(traj.system, p.start, p.end, traj.spacing, split, str(source)))
    return PairDataset(groups)


def random_rotations(n: int, d: int, rng: RngStream) -> np.ndarray:
    return np.stack([random_rotation(d, rng) for _ in range(n)])
