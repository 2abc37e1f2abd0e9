"""Shared domain types, seeded random streams and geometry helpers.

Everything here works in reduced units: k_B = 1, lengths and energies are
dimensionless, masses default to 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

SYSTEM_FORMAT_VERSION = 1
MAX_ATOM_TYPES = 64


class TopologyError(ValueError):
    """Raised for malformed system topologies."""


@dataclass(frozen=True)
class SystemSpec:
    """Topology and force-field parameters of one small surrogate molecule.

    bonds are ``(i, j, k_b, r0)``, angles ``(i, j, k, k_a, theta0)`` with the
    vertex at ``j``, dihedrals ``(i, j, k, l, k_d, n, phi0)``.
    """

    name: str
    n_atoms: int
    atom_types: tuple[int, ...]
    masses: tuple[float, ...]
    bonds: tuple[tuple[int, int, float, float], ...] = ()
    angles: tuple[tuple[int, int, int, float, float], ...] = ()
    dihedrals: tuple[tuple[int, int, int, int, float, int, float], ...] = ()
    nonbonded_sigma: float = 1.0
    dimension: int = 3

    def __post_init__(self):
        object.__setattr__(self, "atom_types", tuple(int(t) for t in self.atom_types))
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        object.__setattr__(
            self, "bonds", tuple((int(i), int(j), float(k), float(r)) for i, j, k, r in self.bonds)
        )
        object.__setattr__(
            self,
            "angles",
            tuple((int(i), int(j), int(k), float(ka), float(t)) for i, j, k, ka, t in self.angles),
        )
        object.__setattr__(
            self,
            "dihedrals",
            tuple(
                (int(i), int(j), int(k), int(l), float(kd), int(n), float(p))
                for i, j, k, l, kd, n, p in self.dihedrals
            ),
        )
        self.validate()

    def validate(self) -> None:
        n = self.n_atoms
        if n < 1:
            raise TopologyError(f"{self.name}: n_atoms must be >= 1")
        if self.dimension not in (1, 2, 3):
            raise TopologyError(f"{self.name}: dimension must be 1, 2 or 3, got {self.dimension}")
        if len(self.atom_types) != n or len(self.masses) != n:
            raise TopologyError(f"{self.name}: atom_types/masses must have length {n}")
        if any(t < 0 or t >= MAX_ATOM_TYPES for t in self.atom_types):
            raise TopologyError(f"{self.name}: atom type ids must lie in [0, {MAX_ATOM_TYPES})")
        if any(not m > 0 for m in self.masses):
            raise TopologyError(f"{self.name}: masses must be positive")
        if not self.nonbonded_sigma > 0:
            raise TopologyError(f"{self.name}: nonbonded_sigma must be positive")
        seen = set()
        for i, j, k_b, _ in self.bonds:
            self._check_indices((i, j), "bond")
            if i == j:
                raise TopologyError(f"{self.name}: bond ({i}, {j}) joins an atom to itself")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise TopologyError(f"{self.name}: duplicate bond {key}")
            seen.add(key)
            if k_b < 0:
                raise TopologyError(f"{self.name}: negative bond constant on {key}")
        for i, j, k, k_a, _ in self.angles:
            self._check_indices((i, j, k), "angle")
            if k_a < 0:
                raise TopologyError(f"{self.name}: negative angle constant on ({i}, {j}, {k})")
        for i, j, k, l, k_d, _, _ in self.dihedrals:
            self._check_indices((i, j, k, l), "dihedral")
            if k_d < 0:
                raise TopologyError(f"{self.name}: negative dihedral constant on ({i}, {j}, {k}, {l})")
        if self.dihedrals and self.dimension != 3:
            raise TopologyError(f"{self.name}: dihedral terms need dimension 3")

    def _check_indices(self, idx, what):
        if any(a < 0 or a >= self.n_atoms for a in idx):
            raise TopologyError(f"{self.name}: {what} {idx} references an atom >= {self.n_atoms}")

    @property
    def masses_array(self) -> np.ndarray:
        return np.asarray(self.masses, dtype=np.float64)

    @property
    def types_array(self) -> np.ndarray:
        return np.asarray(self.atom_types, dtype=np.int64)

    def permuted(self, sigma: Sequence[int]) -> "SystemSpec":
        """Relabel atoms so that old atom ``j`` becomes new atom ``sigma[j]``."""
        sigma = check_permutation(sigma, self.n_atoms)
        inv = np.argsort(sigma)
        m = lambda a: int(sigma[a])  # noqa: E731
        return replace(
            self,
            atom_types=tuple(self.atom_types[int(inv[i])] for i in range(self.n_atoms)),
            masses=tuple(self.masses[int(inv[i])] for i in range(self.n_atoms)),
            bonds=tuple((m(i), m(j), k, r) for i, j, k, r in self.bonds),
            angles=tuple((m(i), m(j), m(k), ka, t) for i, j, k, ka, t in self.angles),
            dihedrals=tuple((m(i), m(j), m(k), m(l), kd, n, p) for i, j, k, l, kd, n, p in self.dihedrals),
        )

    def to_dict(self) -> dict:
        return {
            "format_version": SYSTEM_FORMAT_VERSION,
            "name": self.name,
            "n_atoms": self.n_atoms,
            "atom_types": list(self.atom_types),
            "masses": list(self.masses),
            "bonds": [list(b) for b in self.bonds],
            "angles": [list(a) for a in self.angles],
            "dihedrals": [list(d) for d in self.dihedrals],
            "nonbonded_sigma": self.nonbonded_sigma,
            "dimension": self.dimension,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SystemSpec":
        data = dict(data)
        version = data.pop("format_version", None)
        if version != SYSTEM_FORMAT_VERSION:
            raise TopologyError(f"unsupported system format_version {version!r}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise TopologyError(f"unknown system keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SystemSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class State:
    """Positions and auxiliary variables of one configuration."""

    positions: np.ndarray
    auxiliaries: np.ndarray
    system: SystemSpec = field(repr=False)

    def __post_init__(self):
        shape = (self.system.n_atoms, self.system.dimension)
        pos = np.array(self.positions, dtype=np.float64)
        aux = np.array(self.auxiliaries, dtype=np.float64)
        if pos.shape != shape or aux.shape != shape:
            raise ValueError(f"state arrays must have shape {shape}, got {pos.shape} and {aux.shape}")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(aux))):
            raise ValueError("state contains non-finite entries")
        pos.flags.writeable = False
        aux.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "auxiliaries", aux)

    @classmethod
    def from_positions(cls, positions, system: SystemSpec) -> "State":
        return cls(positions, np.zeros_like(np.asarray(positions, dtype=np.float64)), system)


class RngStream:
    """Counter-based random stream identified by ``(seed, stream id)``.

    Backed by PCG64 seeded through a ``SeedSequence`` whose spawn key is the
    stream path, so every (seed, path, draw index) reproduces across runs.
    """

    def __init__(self, seed: int, stream: int | tuple[int, ...] = 0):
        self.seed = int(seed)
        self.path = tuple(int(s) for s in (stream if isinstance(stream, tuple) else (stream,)))
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    @property
    def stream(self) -> int:
        return self.path[0]

    def substream(self, *key: int) -> "RngStream":
        """Independent child stream; does not advance this stream."""
        return RngStream(self.seed, self.path + tuple(int(k) for k in key))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"expected RngStream or int seed, got {type(rng).__name__}")


def center_of_geometry(positions) -> np.ndarray:
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ValueError("center_of_geometry needs at least one atom")
    return x.mean(axis=-2)


def check_permutation(sigma, n: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.int64)
    if sigma.shape != (n,) or not np.array_equal(np.sort(sigma), np.arange(n)):
        raise ValueError(f"not a permutation of {n} atoms: {sigma.tolist()}")
    return sigma


def permute_rows(array, sigma) -> np.ndarray:
    """Row ``sigma[j]`` of the result is row ``j`` of ``array`` (works on batches)."""
    a = np.asarray(array)
    sigma = check_permutation(sigma, a.shape[-2])
    return a[..., np.argsort(sigma), :]


def apply_permutation(state: State, sigma, permute_system: bool = False) -> State:
    sigma = check_permutation(sigma, state.system.n_atoms)
    system = state.system.permuted(sigma) if permute_system else state.system
    return State(permute_rows(state.positions, sigma), permute_rows(state.auxiliaries, sigma), system)


def is_rotation(R, tol: float = 1e-10) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        return False
    return bool(
        np.max(np.abs(R.T @ R - np.eye(R.shape[0]))) <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


def apply_rigid_motion(positions, R, a=None) -> np.ndarray:
    x = np.asarray(positions, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    d = x.shape[-1]
    if R.shape != (d, d) or not is_rotation(R):
        raise ValueError("R must be a proper rotation (orthogonal, det +1)")
    out = x @ R.T
    if a is not None:
        out = out + np.asarray(a, dtype=np.float64)
    return out


def random_rotation(d: int, rng: RngStream) -> np.ndarray:
    """Haar-uniform rotation from the QR factorisation of a Gaussian matrix."""
    if d == 1:
        return np.ones((1, 1))
    q, r = np.linalg.qr(rng.normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def pairwise_distances(positions) -> np.ndarray:
    """Upper-triangle pairwise distances, batched over leading axes."""
    x = np.asarray(positions, dtype=np.float64)
    n = x.shape[-2]
    i, j = np.triu_indices(n, k=1)
    return np.linalg.norm(x[..., i, :] - x[..., j, :], axis=-1)


def dihedral_angle(positions, i: int, j: int, k: int, l: int) -> np.ndarray:
    """Signed dihedral (radians, in (-pi, pi]) of atoms i-j-k-l; batched."""
    x = np.asarray(positions, dtype=np.float64)
    b1 = x[..., j, :] - x[..., i, :]
    b2 = x[..., k, :] - x[..., j, :]
    b3 = x[..., l, :] - x[..., k, :]
    m = np.cross(b1, b2)
    n = np.cross(b2, b3)
    y = np.linalg.norm(b2, axis=-1) * np.sum(b1 * n, axis=-1)
    return np.arctan2(y, np.sum(m * n, axis=-1))
