"""Builders for surrogate systems: typed linear bead chains and toy 1-/2-D systems."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SystemSpec

# Per bead type: bond radius, mass, preferred angle when central, dihedral stiffness.
@dataclass(frozen=True)
class BeadType:
    radius: float
    mass: float
    theta0: float
    stiffness: float


BEAD_TYPES = (
    BeadType(0.50, 1.0, 1.90, 0.50),
    BeadType(0.55, 1.0, 2.00, 0.60),
    BeadType(0.45, 1.0, 1.85, 0.75),
    BeadType(0.50, 1.0, 1.95, 3.50),
)

BOND_K = 50.0
ANGLE_K = 10.0
DIHEDRAL_N = 2
DIHEDRAL_PHI0 = np.pi / 2  # minima at -pi/4 and 3pi/4
SIGMA = 0.8


def dihedral_minima(n: int = DIHEDRAL_N, phi0: float = DIHEDRAL_PHI0) -> np.ndarray:
    """Angles in (-pi, pi] where k (1 + cos(n phi - phi0)) is minimal."""
    phis = (phi0 + np.pi + 2 * np.pi * np.arange(n)) / n
    return np.angle(np.exp(1j * phis))


def bead_chain(types, name: str | None = None, dimension: int = 3, dihedral_scale: float = 1.0,
               bond_k: float = BOND_K, angle_k: float = ANGLE_K) -> SystemSpec:
    """Linear chain whose force-field parameters are functions of the bead types only."""
    types = tuple(int(t) for t in types)
    n = len(types)
    bt = [BEAD_TYPES[t] for t in types]
    bonds = [(i, i + 1, bond_k, bt[i].radius + bt[i + 1].radius) for i in range(n - 1)]
    angles = [(i - 1, i, i + 1, angle_k, bt[i].theta0) for i in range(1, n - 1)] if dimension >= 2 else []
    dihedrals = []
    if dimension == 3:
        dihedrals = [
            (i - 1, i, i + 1, i + 2, dihedral_scale * (bt[i].stiffness + bt[i + 1].stiffness),
             DIHEDRAL_N, DIHEDRAL_PHI0)
            for i in range(1, n - 2)
        ]
    return SystemSpec(
        name=name or "chain-" + "".join(str(t) for t in types) + f"-d{dimension}",
        n_atoms=n,
        atom_types=types,
        masses=tuple(b.mass for b in bt),
        bonds=tuple(bonds),
        angles=tuple(angles),
        dihedrals=tuple(dihedrals),
        nonbonded_sigma=SIGMA,
        dimension=dimension,
    )


def point_system(name: str, dimension: int, n_atoms: int = 1) -> SystemSpec:
    """Unbonded particles in an external potential (double well, Mueller-Brown)."""
    return SystemSpec(name, n_atoms, (0,) * n_atoms, (1.0,) * n_atoms, dimension=dimension)


def build_chain(system: SystemSpec, dihedral: float | np.ndarray | None = None) -> np.ndarray:
    """Positions of a linear chain at its equilibrium bond lengths and angles.

    ``dihedral`` sets every backbone torsion (3-D only); by default the first
    minimum of the dihedral term is used.
    """
    n, d = system.n_atoms, system.dimension
    r0 = {(min(i, j), max(i, j)): r for i, j, _, r in system.bonds}
    th = {j: t for _, j, _, _, t in system.angles}
    bond = lambda i: r0.get((i - 1, i), 1.0)  # noqa: E731
    if d == 1:
        return np.cumsum([0.0] + [bond(i) for i in range(1, n)])[:, None]
    x = np.zeros((n, d))
    if n == 1:
        return x
    x[1, 0] = bond(1)
    if d == 2:
        heading = 0.0
        for i in range(2, n):
            turn = np.pi - th.get(i - 1, 2.0)
            heading += turn if i % 2 == 0 else -turn
            x[i] = x[i - 1] + bond(i) * np.array([np.cos(heading), np.sin(heading)])
        return x
    if n >= 3:
        t = th.get(1, 2.0)
        x[2] = x[1] + bond(2) * np.array([-np.cos(t), np.sin(t), 0.0])
    if dihedral is None:
        dihedral = float(dihedral_minima()[0])
    phis = np.broadcast_to(np.asarray(dihedral, dtype=np.float64), (max(n - 3, 0),))
    for i in range(3, n):
        x[i] = _place(x[i - 3], x[i - 2], x[i - 1], bond(i), th.get(i - 1, 2.0), phis[i - 3])
    return x


def _place(a, b, c, bond, angle, torsion):
    """NeRF placement of atom d given a-b-c, |cd|, angle bcd and torsion abcd."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * np.cos(angle), bond * np.sin(angle) * np.cos(torsion),
                   bond * np.sin(angle) * np.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


# Default 4-bead family: training sequences keep the middle pair away from type 3,
# which makes the held-out "3 3" middle a stiff, rarely crossing torsion.
TRAIN_SEQUENCES = (
    (0, 0, 1, 3), (3, 1, 0, 2), (1, 2, 0, 0), (2, 0, 2, 1),
    (3, 1, 1, 3), (0, 2, 1, 2), (1, 0, 0, 3), (2, 2, 1, 0),
)
HELDOUT_SEQUENCES = ((2, 1, 2, 3), (1, 3, 3, 2))


def chain_family(train=TRAIN_SEQUENCES, heldout=HELDOUT_SEQUENCES, dimension: int = 3):
    return ([bead_chain(t, dimension=dimension) for t in train],
            [bead_chain(t, dimension=dimension) for t in heldout])
