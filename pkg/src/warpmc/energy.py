"""Surrogate potentials, forces and the augmented target density.

All energies accept positions of shape ``(..., N, d)`` and return an array of
shape ``(...)``; forces keep the input shape.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import State, SystemSpec

LOG_2PI = float(np.log(2.0 * np.pi))

# Conventional Mueller-Brown constants.
MB_A = (-200.0, -100.0, -170.0, 15.0)
MB_a = (-1.0, -1.0, -6.5, 0.7)
MB_b = (0.0, 0.0, 11.0, 0.6)
MB_c = (-10.0, -10.0, -6.5, 0.7)
MB_X0 = (1.0, 0.0, -0.5, -1.0)
MB_Y0 = (0.0, 0.5, 1.5, 1.0)


class EnergyError(ValueError):
    pass


class Potential:
    """Base class. Subclasses implement ``_energy_grad``."""

    kind = "abstract"
    temperature: float = 1.0

    def energy(self, positions) -> np.ndarray:
        return self._energy_grad(np.asarray(positions, dtype=np.float64), need_grad=False)[0]

    def gradient(self, positions) -> np.ndarray:
        return self._energy_grad(np.asarray(positions, dtype=np.float64), need_grad=True)[1]

    def force(self, positions) -> np.ndarray:
        return -self.gradient(positions)

    def energy_and_gradient(self, positions):
        return self._energy_grad(np.asarray(positions, dtype=np.float64), need_grad=True)

    def _energy_grad(self, x, need_grad):  # pragma: no cover - abstract
        raise NotImplementedError


class DoubleWell1D(Potential):
    """U(x) = b (x^2 - c^2)^2 summed over every coordinate."""

    kind = "double_well"

    def __init__(self, barrier: float = 1.0, offset: float = 1.0, temperature: float = 1.0):
        self.barrier = float(barrier)
        self.offset = float(offset)
        self.temperature = float(temperature)

    def _energy_grad(self, x, need_grad):
        s = x * x - self.offset**2
        e = self.barrier * np.sum(s * s, axis=(-2, -1))
        g = 4.0 * self.barrier * x * s if need_grad else None
        return e, g

    def marginal_density(self, grid):
        """Unnormalised one-coordinate Boltzmann weight on ``grid``."""
        g = np.asarray(grid, dtype=np.float64)
        return np.exp(-self.barrier * (g * g - self.offset**2) ** 2 / self.temperature)


class Harmonic(Potential):
    """U(x) = k/2 |x - center|^2; stationary laws are Gaussian, used as an oracle."""

    kind = "harmonic"

    def __init__(self, k: float = 1.0, center=0.0, temperature: float = 1.0):
        self.k = float(k)
        self.center = np.asarray(center, dtype=np.float64)
        self.temperature = float(temperature)

    def _energy_grad(self, x, need_grad):
        dx = x - self.center
        e = 0.5 * self.k * np.sum(dx * dx, axis=(-2, -1))
        return e, (self.k * dx if need_grad else None)


class MuellerBrown2D(Potential):
    """Four-term Mueller-Brown surface applied to every atom (d = 2), times ``scale``."""

    kind = "mueller_brown"

    def __init__(self, A=MB_A, a=MB_a, b=MB_b, c=MB_c, x0=MB_X0, y0=MB_Y0, scale: float = 0.1,
                 temperature: float = 1.0):
        self.A, self.a, self.b, self.c, self.x0, self.y0 = (
            np.asarray(v, dtype=np.float64) for v in (A, a, b, c, x0, y0)
        )
        self.scale = float(scale)
        self.temperature = float(temperature)

    def _energy_grad(self, x, need_grad):
        if x.shape[-1] != 2:
            raise EnergyError("Mueller-Brown needs d = 2")
        dx = x[..., 0:1] - self.x0  # (..., N, 4)
        dy = x[..., 1:2] - self.y0
        terms = self.scale * self.A * np.exp(self.a * dx * dx + self.b * dx * dy + self.c * dy * dy)
        e = terms.sum(axis=(-2, -1))
        if not need_grad:
            return e, None
        gx = np.sum(terms * (2 * self.a * dx + self.b * dy), axis=-1)
        gy = np.sum(terms * (self.b * dx + 2 * self.c * dy), axis=-1)
        return e, np.stack([gx, gy], axis=-1)


def nonbonded_pairs(system: SystemSpec) -> np.ndarray:
    """Pairs separated by three or more bonds (1-2 and 1-3 pairs are excluded)."""
    n = system.n_atoms
    adj = [[] for _ in range(n)]
    for i, j, *_ in system.bonds:
        adj[i].append(j)
        adj[j].append(i)
    pairs = []
    for src in range(n):
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            if dist[u] >= 2:
                continue
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        pairs.extend((src, t) for t in range(src + 1, n) if t not in dist)
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _incidence(index, n):
    m = np.zeros((n, len(index)))
    m[index, np.arange(len(index))] = 1.0
    return m


class BeadChain(Potential):
    """Bonded terms read from a ``SystemSpec`` plus truncated r^-12 repulsion.

    U = sum k_b (r - r0)^2 + sum k_a (theta - theta0)^2
        + sum k_d (1 + cos(n phi - phi0)) + sum_{r < 3 sigma} (sigma / r)^12
    """

    kind = "bead_chain"

    def __init__(self, system: SystemSpec, temperature: float = 1.0, cutoff_factor: float = 3.0):
        self.system = system
        self.temperature = float(temperature)
        n = system.n_atoms
        b = np.asarray([t[:2] for t in system.bonds], dtype=np.int64).reshape(-1, 2)
        self._bi, self._bj = b[:, 0], b[:, 1]
        self._kb = np.asarray([t[2] for t in system.bonds])
        self._r0 = np.asarray([t[3] for t in system.bonds])
        a = np.asarray([t[:3] for t in system.angles], dtype=np.int64).reshape(-1, 3)
        self._ai, self._aj, self._ak = a.T
        self._ka = np.asarray([t[3] for t in system.angles])
        self._t0 = np.asarray([t[4] for t in system.angles])
        dh = np.asarray([t[:4] for t in system.dihedrals], dtype=np.int64).reshape(-1, 4)
        self._di, self._dj, self._dk, self._dl = dh.T
        self._kd = np.asarray([t[4] for t in system.dihedrals])
        self._dn = np.asarray([t[5] for t in system.dihedrals], dtype=np.float64)
        self._p0 = np.asarray([t[6] for t in system.dihedrals])
        nb = nonbonded_pairs(system)
        self._ni, self._nj = nb[:, 0], nb[:, 1]
        self.sigma = system.nonbonded_sigma
        self.cutoff = cutoff_factor * self.sigma
        inc = lambda idx: _incidence(idx, n)  # noqa: E731
        self._inc = {
            "bi": inc(self._bi), "bj": inc(self._bj),
            "ai": inc(self._ai), "aj": inc(self._aj), "ak": inc(self._ak),
            "di": inc(self._di), "dj": inc(self._dj), "dk": inc(self._dk), "dl": inc(self._dl),
            "ni": inc(self._ni), "nj": inc(self._nj),
        }

    def _energy_grad(self, x, need_grad):
        s = self.system
        if x.shape[-2:] != (s.n_atoms, s.dimension):
            raise EnergyError(f"positions shape {x.shape} does not match system {s.name}")
        e = 0.0
        g = np.zeros_like(x) if need_grad else None
        inc = self._inc

        if len(self._kb):
            r = x[..., self._bj, :] - x[..., self._bi, :]
            dist = np.sqrt((r * r).sum(-1))
            if (dist < 1e-12).any():
                raise EnergyError(f"{s.name}: bonded atoms coincide")
            dev = dist - self._r0
            e = e + (self._kb * dev * dev).sum(-1)
            if need_grad:
                gr = (2.0 * self._kb * dev / dist)[..., None] * r
                g += (inc["bj"] - inc["bi"]) @ gr

        if len(self._ka):
            u = x[..., self._ai, :] - x[..., self._aj, :]
            v = x[..., self._ak, :] - x[..., self._aj, :]
            uu = (u * u).sum(-1)
            vv = (v * v).sum(-1)
            inv = 1.0 / np.sqrt(uu * vv)
            cos = np.clip((u * v).sum(-1) * inv, -1.0, 1.0)
            dev = np.arccos(cos) - self._t0
            e = e + (self._ka * dev * dev).sum(-1)
            if need_grad:
                sin = np.maximum(np.sqrt(1.0 - cos * cos), 1e-12)
                pre = -2.0 * self._ka * dev / sin
                gu = (pre * inv)[..., None] * v - (pre * cos / uu)[..., None] * u
                gv = (pre * inv)[..., None] * u - (pre * cos / vv)[..., None] * v
                g += inc["ai"] @ gu + inc["ak"] @ gv - inc["aj"] @ (gu + gv)

        if len(self._kd):
            b1 = x[..., self._dj, :] - x[..., self._di, :]
            b2 = x[..., self._dk, :] - x[..., self._dj, :]
            b3 = x[..., self._dl, :] - x[..., self._dk, :]
            m = _cross(b1, b2)
            nn = _cross(b2, b3)
            b2b2 = (b2 * b2).sum(-1)
            nb2 = np.sqrt(b2b2)
            phi = np.arctan2(nb2 * (b1 * nn).sum(-1), (m * nn).sum(-1))
            arg = self._dn * phi - self._p0
            e = e + (self._kd * (1.0 + np.cos(arg))).sum(-1)
            if need_grad:
                dU = -self._kd * self._dn * np.sin(arg)
                mm = np.maximum((m * m).sum(-1), 1e-24)
                n2 = np.maximum((nn * nn).sum(-1), 1e-24)
                gi = (-dU * nb2 / mm)[..., None] * m
                gl = (dU * nb2 / n2)[..., None] * nn
                p = ((b1 * b2).sum(-1) / b2b2)[..., None]
                q = ((b3 * b2).sum(-1) / b2b2)[..., None]
                gj = -(1.0 + p) * gi + q * gl
                gk = -gi - gj - gl
                g += inc["di"] @ gi + inc["dj"] @ gj + inc["dk"] @ gk + inc["dl"] @ gl

        if len(self._ni):
            r = x[..., self._nj, :] - x[..., self._ni, :]
            dist = np.sqrt((r * r).sum(-1))
            bad = dist < 1e-12
            if bad.any():
                k = int(np.argwhere(bad.reshape(-1, len(self._ni)))[0, 1])
                raise EnergyError(
                    f"{s.name}: atoms {int(self._ni[k])} and {int(self._nj[k])} coincide"
                )
            sr = np.where(dist < self.cutoff, self.sigma / dist, 0.0)
            sr12 = sr**12
            e = e + sr12.sum(-1)
            if need_grad:
                gr = (-12.0 * sr12 / (dist * dist))[..., None] * r
                g += (inc["nj"] - inc["ni"]) @ gr
        if np.isscalar(e):
            e = np.full(x.shape[:-2], e)
        return e, g


def _cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


@dataclass(frozen=True)
class AugmentedTarget:
    """exp(-U/T) N(aux; 0, I) over positions and auxiliaries."""

    potential: Potential
    temperature: float | None = None

    @property
    def T(self) -> float:
        return self.potential.temperature if self.temperature is None else self.temperature

    def log_density(self, positions, auxiliaries) -> np.ndarray:
        return log_mu_aug_arrays(self.potential, positions, auxiliaries, self.T)


def potential_energy(potential: Potential, positions) -> np.ndarray:
    return potential.energy(positions)


def force(potential: Potential, positions) -> np.ndarray:
    return potential.force(positions)


def gaussian_log_pdf(v) -> np.ndarray:
    """Standard-normal log density summed over the last two axes."""
    v = np.asarray(v, dtype=np.float64)
    k = v.shape[-2] * v.shape[-1]
    return -0.5 * np.sum(v * v, axis=(-2, -1)) - 0.5 * k * LOG_2PI


def log_mu_aug_arrays(potential: Potential, positions, auxiliaries, temperature=None) -> np.ndarray:
    """-U/T + log N(aux; 0, I). The Gaussian keeps its normaliser; the
    Boltzmann partition function is omitted (it cancels in every MH ratio)."""
    T = potential.temperature if temperature is None else temperature
    return -potential.energy(positions) / T + gaussian_log_pdf(auxiliaries)


def log_mu_aug(target: AugmentedTarget, state: State) -> float:
    return float(target.log_density(state.positions, state.auxiliaries))


def kinetic_energy(velocities, masses) -> float:
    v = np.asarray(velocities, dtype=np.float64)
    m = np.asarray(masses, dtype=np.float64)
    if m.shape != v.shape[-2:-1]:
        raise ValueError(f"masses shape {m.shape} does not match velocities {v.shape}")
    return 0.5 * np.sum(m[:, None] * v * v, axis=(-2, -1))


def make_potential(kind: str, params: dict | None = None, system: SystemSpec | None = None,
                   temperature: float = 1.0) -> Potential:
    params = dict(params or {})
    if kind == "double_well":
        return DoubleWell1D(temperature=temperature, **params)
    if kind == "mueller_brown":
        return MuellerBrown2D(temperature=temperature, **params)
    if kind == "harmonic":
        return Harmonic(temperature=temperature, **params)
    if kind == "bead_chain":
        if system is None:
            raise EnergyError("bead_chain potential needs a SystemSpec")
        return BeadChain(system, temperature=temperature, **params)
    raise EnergyError(f"unknown potential kind {kind!r}")
