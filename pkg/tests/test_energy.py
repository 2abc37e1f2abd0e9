import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from warpmc.core import State, SystemSpec, apply_rigid_motion, random_rotation
from warpmc.energy import (AugmentedTarget, BeadChain, DoubleWell1D, EnergyError, Harmonic, MuellerBrown2D,
                           force, gaussian_log_pdf, kinetic_energy, log_mu_aug, make_potential, nonbonded_pairs,
                           potential_energy)

from conftest import fd_grad, random_conformation


def naive_bead_energy(system, x):
    """Term-by-term loops, written independently of the vectorised code."""
    e = 0.0
    for i, j, kb, r0 in system.bonds:
        e += kb * (math.dist(x[i], x[j]) - r0) ** 2
    for i, j, k, ka, t0 in system.angles:
        u, v = x[i] - x[j], x[k] - x[j]
        c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        e += ka * (math.acos(max(-1.0, min(1.0, c))) - t0) ** 2
    for i, j, k, l, kd, n, p0 in system.dihedrals:
        b0, b1, b2 = x[i] - x[j], x[k] - x[j], x[l] - x[k]
        b1n = b1 / np.linalg.norm(b1)
        v = b0 - np.dot(b0, b1n) * b1n
        w = b2 - np.dot(b2, b1n) * b1n
        phi = math.atan2(np.dot(np.cross(b1n, v), w), np.dot(v, w))
        e += kd * (1 + math.cos(n * phi - p0))
    bonded = {frozenset(b[:2]) for b in system.bonds}
    for i in range(system.n_atoms):
        for j in range(i + 1, system.n_atoms):
            # skip 1-2 and 1-3 neighbours
            if frozenset((i, j)) in bonded:
                continue
            if any(frozenset((i, m)) in bonded and frozenset((m, j)) in bonded for m in range(system.n_atoms)):
                continue
            r = math.dist(x[i], x[j])
            if r < 3 * system.nonbonded_sigma:
                e += (system.nonbonded_sigma / r) ** 12
    return e


def test_double_well_minima_and_barrier_force():
    dw = DoubleWell1D(barrier=2.0, offset=1.5)
    assert dw.energy([[1.5]]) == 0.0
    assert dw.energy([[-1.5]]) == 0.0
    assert np.allclose(force(dw, [[0.0]]), 0.0)


def test_two_bead_bond_at_rest():
    s = SystemSpec("b", 2, [0, 0], [1, 1], bonds=[(0, 1, 1.0, 1.0)], dimension=3)
    pot = BeadChain(s)
    x = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert potential_energy(pot, x) == 0.0
    assert np.allclose(force(pot, x), 0.0)


def test_bead_chain_matches_naive_loops(chain5, rng):
    pot = BeadChain(chain5)
    for k in range(20):
        x = random_conformation(chain5, rng.substream(k), jitter=0.2)
        assert np.isclose(pot.energy(x), naive_bead_energy(chain5, x), rtol=1e-10)


def test_bead_chain_2d_matches_naive_loops(chain4_2d, rng):
    pot = BeadChain(chain4_2d)
    x = random_conformation(chain4_2d, rng, jitter=0.2)
    assert np.isclose(pot.energy(x), naive_bead_energy(chain4_2d, x), rtol=1e-10)


def test_nonbonded_truncation():
    s = SystemSpec("nb", 4, [0] * 4, [1] * 4, bonds=[(0, 1, 0, 1), (1, 2, 0, 1), (2, 3, 0, 1)],
                   nonbonded_sigma=0.5, dimension=1)
    assert nonbonded_pairs(s).tolist() == [[0, 3]]
    pot = BeadChain(s)
    assert pot.energy([[0.0], [1.0], [2.0], [1.49]]) > 0
    assert pot.energy([[0.0], [1.0], [2.0], [1.51]]) == 0.0


def test_coincident_nonbonded_atoms_named():
    s = SystemSpec("nb", 4, [0] * 4, [1] * 4, bonds=[(0, 1, 1, 1), (1, 2, 1, 1), (2, 3, 1, 1)], dimension=1)
    with pytest.raises(EnergyError, match="atoms 0 and 3"):
        BeadChain(s).energy([[0.0], [1.0], [0.5], [0.0]])


def _potentials():
    s5 = __import__("warpmc.systems", fromlist=["bead_chain"]).bead_chain((0, 1, 2, 3, 1))
    return [
        ("double_well", DoubleWell1D(2.0, 1.0), lambda r: r.normal((3, 1))),
        ("harmonic", Harmonic(2.0, 0.3), lambda r: r.normal((2, 3))),
        ("mueller_brown", MuellerBrown2D(), lambda r: np.array([[-0.5, 1.0]]) + 0.5 * r.normal((2, 2))),
        ("bead_chain", BeadChain(s5), lambda r: random_conformation(s5, r, 0.2)),
    ]


@pytest.mark.parametrize("name,pot,draw", _potentials(), ids=[p[0] for p in _potentials()])
def test_force_matches_finite_differences(name, pot, draw, rng):
    worst = 0.0
    for k in range(100):
        x = draw(rng.substream(k))
        g = -force(pot, x)
        ref = fd_grad(lambda y: float(pot.energy(y)), x)
        worst = max(worst, np.max(np.abs(g - ref)) / max(1.0, np.max(np.abs(ref))))
    assert worst < 1e-5


def test_energy_batching(chain5, rng):
    pot = BeadChain(chain5)
    xs = np.stack([random_conformation(chain5, rng.substream(k), 0.2) for k in range(6)]).reshape(2, 3, 5, 3)
    e, g = pot.energy_and_gradient(xs)
    assert e.shape == (2, 3) and g.shape == xs.shape
    assert np.isclose(e[1, 2], pot.energy(xs[1, 2]))
    assert np.allclose(g[0, 1], pot.gradient(xs[0, 1]))


def test_bead_chain_rigid_invariance(chain5, rng):
    pot = BeadChain(chain5)
    for k in range(20):
        r = rng.substream(k)
        x = random_conformation(chain5, r, 0.2)
        y = apply_rigid_motion(x, random_rotation(3, r), r.normal(3))
        assert np.isclose(pot.energy(x), pot.energy(y), rtol=1e-12)


def test_bead_chain_symmetric_permutation(rng):
    s = SystemSpec("sym", 2, [1, 1], [1, 1], bonds=[(0, 1, 3.0, 1.0)], dimension=3)
    pot = BeadChain(s)
    x = rng.normal((2, 3))
    assert np.isclose(pot.energy(x), pot.energy(x[::-1]))
    # a reversed 4-bead chain with a palindromic sequence maps its topology onto itself
    from warpmc.systems import bead_chain

    c = bead_chain((0, 2, 2, 0))
    x = random_conformation(c, rng, 0.2)
    assert np.isclose(BeadChain(c).energy(x), BeadChain(c).energy(x[::-1]), rtol=1e-12)


def test_log_mu_aug_examples():
    dw = DoubleWell1D(1.0, 1.0)
    s = SystemSpec("p", 2, [0, 0], [1, 1], dimension=1)
    st_ = State(np.ones((2, 1)), np.zeros((2, 1)), s)
    assert np.isclose(log_mu_aug(AugmentedTarget(dw), st_), -(2 * 1 / 2) * math.log(2 * math.pi))
    x = np.array([[0.3], [-0.2]])
    a = AugmentedTarget(dw, temperature=1.0).log_density(x, np.zeros_like(x))
    b = AugmentedTarget(dw, temperature=2.0).log_density(x, np.zeros_like(x))
    g = gaussian_log_pdf(np.zeros_like(x))
    assert np.isclose(b - g, 0.5 * (a - g), rtol=0, atol=1e-15)


def test_log_mu_aug_compositional(chain5, rng):
    pot = BeadChain(chain5, temperature=0.7)
    x = random_conformation(chain5, rng, 0.1)
    v = rng.normal(x.shape)
    ref = -pot.energy(x) / 0.7 + sum(-0.5 * vi * vi - 0.5 * math.log(2 * math.pi) for vi in v.ravel())
    assert np.isclose(AugmentedTarget(pot).log_density(x, v), ref, rtol=1e-13)


@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)))
@settings(max_examples=50, deadline=None)
def test_auxiliary_factor_exact(a):
    t = AugmentedTarget(MuellerBrown2D())
    x = np.array([[-0.5, 1.4], [0.6, 0.0], [0.0, 0.4]])
    diff = t.log_density(x, a) - t.log_density(x, np.zeros_like(a))
    assert np.isclose(diff, -0.5 * np.sum(a * a), rtol=1e-12, atol=1e-12)


def test_kinetic_energy():
    assert kinetic_energy(np.zeros((3, 3)), [1, 1, 1]) == 0.0
    assert kinetic_energy([[1.0, 0, 0]], [2.0]) == 1.0
    r = np.random.default_rng(3)
    v, m = r.normal(size=(4, 3)), r.uniform(0.5, 2, 4)
    ref = sum(0.5 * m[i] * v[i, k] ** 2 for i, k in itertools.product(range(4), range(3)))
    assert np.isclose(kinetic_energy(v, m), ref)


def test_make_potential():
    assert make_potential("double_well", {"barrier": 3.0}).barrier == 3.0
    with pytest.raises(EnergyError):
        make_potential("bead_chain")
    with pytest.raises(EnergyError):
        make_potential("nope")


def test_mueller_brown_needs_2d():
    with pytest.raises(EnergyError):
        MuellerBrown2D().energy(np.zeros((1, 3)))
