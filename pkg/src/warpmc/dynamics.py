"""Langevin dynamics with the BAOAB splitting.

Noise is drawn in fixed-size blocks so a run is bit-reproducible from its
stream regardless of how it is chunked into stored frames.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, SystemSpec, as_rng
from .energy import Potential
from .fileio import read_container, write_container

log = logging.getLogger(__name__)

NOISE_BLOCK = 1024
BLOWUP_ENERGY = 1e6
TRAJECTORY_FORMAT_VERSION = 1


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LangevinParams:
    dt: float
    gamma: float
    temperature: float
    masses: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.dt > 0 and self.gamma > 0 and self.temperature >= 0):
            raise ValueError("dt and gamma must be positive, temperature non-negative")
        if self.dt * self.gamma >= 1.0:
            raise ValueError(f"dt * gamma = {self.dt * self.gamma:.3g} must be < 1")
        if self.dt * self.gamma > 0.5:
            warnings.warn(f"dt * gamma = {self.dt * self.gamma:.3g} is above 0.5", stacklevel=2)

    def mass_array(self, n_atoms: int) -> np.ndarray:
        if self.masses is None:
            return np.ones(n_atoms)
        m = np.asarray(self.masses, dtype=np.float64)
        if m.shape != (n_atoms,):
            raise ValueError(f"expected {n_atoms} masses, got {m.shape}")
        return m

    def to_dict(self):
        return {"dt": self.dt, "gamma": self.gamma, "temperature": self.temperature,
                "masses": None if self.masses is None else list(self.masses)}


def params_for_system(system: SystemSpec, dt: float, gamma: float, temperature: float) -> LangevinParams:
    return LangevinParams(dt, gamma, temperature, tuple(system.masses))


@dataclass
class Trajectory:
    frames: np.ndarray  # (n_frames, N, d)
    spacing: int
    params: LangevinParams
    system: SystemSpec
    energies: np.ndarray | None = field(default=None, repr=False)
    wall_time: float = 0.0

    def __post_init__(self):
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError("frames must have shape (n_frames, N, d)")

    def __len__(self):
        return len(self.frames)

    def save(self, path) -> str:
        meta = {
            "format_version": TRAJECTORY_FORMAT_VERSION,
            "system_name": self.system.name,
            "system": self.system.to_dict(),
            "n_atoms": self.system.n_atoms,
            "dimension": self.system.dimension,
            "n_frames": len(self.frames),
            "spacing": self.spacing,
            "params": self.params.to_dict(),
            "wall_time": self.wall_time,
        }
        arrays = {"frames": self.frames}
        if self.energies is not None:
            arrays["energies"] = self.energies
        return write_container(path, "trajectory", meta, arrays)

    @classmethod
    def load(cls, path) -> "Trajectory":
        meta, arrays = read_container(path, "trajectory")
        if meta.get("format_version") != TRAJECTORY_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported trajectory format_version")
        p = meta["params"]
        params = LangevinParams(p["dt"], p["gamma"], p["temperature"],
                                None if p["masses"] is None else tuple(p["masses"]))
        return cls(arrays["frames"], meta["spacing"], params, SystemSpec.from_dict(meta["system"]),
                   arrays.get("energies"), meta.get("wall_time", 0.0))


def _coefficients(params: LangevinParams, masses):
    c1 = np.exp(-params.gamma * params.dt)
    c2 = np.sqrt(params.temperature * (1.0 - c1 * c1) / masses)[:, None]
    return c1, c2


def _checked_gradient(potential, x):
    e, g = potential.energy_and_gradient(x)
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))[0]
        raise SimulationError(f"non-finite force on atom {int(bad[-2])}")
    return e, g


def langevin_step(positions, velocities, potential: Potential, params: LangevinParams, rng, noise=None):
    """One BAOAB step: kick/2, drift/2, exact Ornstein-Uhlenbeck, drift/2, kick/2.

    ``noise`` overrides the standard-normal draw (same shape as positions).
    """
    x = np.array(positions, dtype=np.float64)
    v = np.array(velocities, dtype=np.float64)
    m = params.mass_array(x.shape[-2])[:, None]
    c1, c2 = _coefficients(params, m[:, 0])
    half = 0.5 * params.dt
    _, g = _checked_gradient(potential, x)
    v = v - half * g / m
    x = x + half * v
    xi = as_rng(rng).normal(x.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    v = c1 * v + c2 * xi
    x = x + half * v
    _, g = _checked_gradient(potential, x)
    v = v - half * g / m
    return x, v


class _Noise:
    """Block-wise Gaussian noise from one stream or from one stream per replica."""

    def __init__(self, rngs, shape):
        self.rngs = rngs
        self.shape = shape
        self.buf = None
        self.pos = 0

    def next(self):
        if self.buf is None or self.pos == len(self.buf):
            if isinstance(self.rngs, RngStream):
                self.buf = self.rngs.normal((NOISE_BLOCK,) + self.shape)
            else:
                per = self.shape[1:]
                self.buf = np.stack([r.normal((NOISE_BLOCK,) + per) for r in self.rngs], axis=1)
            self.pos = 0
        out = self.buf[self.pos]
        self.pos += 1
        return out


def _maxwell_boltzmann(rngs, shape, masses, temperature):
    scale = np.sqrt(temperature / masses)[:, None]
    if isinstance(rngs, RngStream):
        return rngs.normal(shape) * scale
    return np.stack([r.normal(shape[1:]) for r in rngs]) * scale


def _integrate(x, v, potential, params, n_steps, noise, store_every=0, blowup=BLOWUP_ENERGY):
    """Run ``n_steps`` BAOAB steps with a cached force; optionally record frames."""
    m = params.mass_array(x.shape[-2])[:, None]
    c1, c2 = _coefficients(params, m[:, 0])
    half = 0.5 * params.dt
    e, g = _checked_gradient(potential, x)
    frames, energies = [], []
    if store_every:
        frames.append(x.copy())
        energies.append(np.array(e, copy=True))
    for step in range(1, n_steps + 1):
        v = v - half * g / m
        x = x + half * v
        v = c1 * v + c2 * noise.next()
        x = x + half * v
        e, g = _checked_gradient(potential, x)
        v = v - half * g / m
        if np.any(e > blowup):
            raise SimulationError(f"energy {float(np.max(e)):.3g} exceeded blow-up threshold at step {step}")
        if store_every and step % store_every == 0:
            frames.append(x.copy())
            energies.append(np.array(e, copy=True))
    return x, v, frames, energies


def simulate(system: SystemSpec, potential: Potential, params: LangevinParams, n_steps: int,
             store_every: int, rng, x0=None, v0=None, burn_in_steps: int = 0,
             blowup: float = BLOWUP_ENERGY) -> Trajectory:
    """Simulate one chain; stores the initial frame and every ``store_every``-th frame.

    ``burn_in_steps`` are run first and discarded (the stored trajectory starts
    after them).
    """
    if not (n_steps >= store_every >= 1):
        raise ValueError("need n_steps >= store_every >= 1")
    rng = as_rng(rng)
    x = np.array(initial_positions(system, potential) if x0 is None else x0, dtype=np.float64)
    masses = params.mass_array(system.n_atoms)
    v = _maxwell_boltzmann(rng, x.shape, masses, params.temperature) if v0 is None else np.array(v0, float)
    noise = _Noise(rng, x.shape)
    if burn_in_steps:
        x, v, _, _ = _integrate(x, v, potential, params, burn_in_steps, noise, 0, blowup)
    t0 = time.perf_counter()
    x, v, frames, energies = _integrate(x, v, potential, params, n_steps, noise, store_every, blowup)
    return Trajectory(np.stack(frames), store_every, params, system, np.asarray(energies),
                      time.perf_counter() - t0)


def simulate_replicas(system, potential, params, x0, n_steps, store_every, rngs, burn_in_steps=0,
                      blowup=BLOWUP_ENERGY):
    """Vectorised independent chains, replica ``k`` driven only by ``rngs[k]``.

    ``x0`` has shape (R, N, d) or (N, d). Returns an array (R, n_frames, N, d)
    with the same frames each chain would give under :func:`simulate`.
    """
    rngs = list(rngs)
    R = len(rngs)
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (R, system.n_atoms, system.dimension)).copy()
    masses = params.mass_array(system.n_atoms)
    v = _maxwell_boltzmann(rngs, x.shape, masses, params.temperature)
    noise = _Noise(rngs, x.shape)
    if burn_in_steps:
        x, v, _, _ = _integrate(x, v, potential, params, burn_in_steps, noise, 0, blowup)
    if n_steps == 0:
        return x[:, None].copy()
    _, _, frames, _ = _integrate(x, v, potential, params, n_steps, noise, store_every, blowup)
    return np.stack(frames, axis=1)


def conditional_ensemble(system, potential, params, x_start, horizon_steps: int, n_replicas: int, rng):
    """Final frames of ``n_replicas`` independent runs of ``horizon_steps`` from ``x_start``.

    Replica ``k`` uses ``rng.substream(k)``, so replica 0 matches
    ``simulate(..., rng=rng.substream(0))``.
    """
    if n_replicas < 1:
        raise ValueError("n_replicas must be >= 1")
    rng = as_rng(rng)
    x_start = np.asarray(x_start, dtype=np.float64)
    if horizon_steps == 0:
        return np.repeat(x_start[None], n_replicas, axis=0)
    out = simulate_replicas(system, potential, params, x_start, horizon_steps, horizon_steps,
                            [rng.substream(k) for k in range(n_replicas)])
    return out[:, -1]


def initial_positions(system: SystemSpec, potential: Potential) -> np.ndarray:
    """A reasonable low-energy starting configuration for each potential kind."""
    n, d = system.n_atoms, system.dimension
    kind = getattr(potential, "kind", "")
    if kind == "double_well":
        return np.full((n, d), potential.offset)
    if kind == "harmonic":
        return np.broadcast_to(potential.center, (n, d)).astype(np.float64).copy()
    if kind == "mueller_brown":
        return np.tile([-0.558, 1.442], (n, 1))
    from .systems import build_chain

    return build_chain(system)
