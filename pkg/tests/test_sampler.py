import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from warpmc.core import RngStream, State, dihedral_angle
from warpmc.energy import AugmentedTarget, BeadChain, DoubleWell1D, Harmonic
from warpmc.sampler import (Chain, DihedralSignConstraint, IdentityProposal, SamplerAborted, always_pass,
                            explore, gibbs_refresh_aux, mh_log_alpha, sample_mcmc)
from warpmc.systems import bead_chain, build_chain, point_system

DW = DoubleWell1D(barrier=2.0)


def reference_mh(pot, x0, M, scale, rng):
    """Textbook single-proposal MH with auxiliary refresh, written out longhand."""
    x = float(x0)
    out = []
    for _ in range(M):
        zp = rng.normal((1, 1, 1, 1)).item()
        zv = rng.normal((1, 1, 1, 1)).item()
        eps = rng.normal((1, 1, 1, 1)).item()
        u = rng.uniform((1, 1)).item()
        y = x + scale * zp
        ex, ey = pot.energy(np.array([[x]])).item(), pot.energy(np.array([[y]])).item()
        # log mu(y, zv) + log q(x, eps | y) - log mu(x, eps) - log q(y, zv | x); Gaussian factors cancel
        log_r = (-ey + -0.5 * zv**2 - 0.5 * ((x - y) / scale) ** 2 - 0.5 * eps**2) - \
                (-ex - 0.5 * eps**2 - 0.5 * zp**2 - 0.5 * zv**2)
        if np.log(u) < min(0.0, log_r):
            x = y
        out.append(x)
    return np.array(out)


def test_single_proposal_matches_reference_loop():
    M = 100_000
    prop = IdentityProposal(0.7)
    ch = sample_mcmc(prop, AugmentedTarget(DW), np.array([[1.0]]), M, 1, RngStream(8))
    ref = reference_mh(DW, 1.0, M, 0.7, RngStream(8))
    got = ch.states[0, :, 0, 0]
    assert np.allclose(got, ref, rtol=0, atol=1e-12)
    assert np.array_equal(got != np.concatenate([[1.0], got[:-1]]), ch.accepted[0])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(1, 9), st.integers(0, 10_000))
def test_length_and_acceptance_accounting(M, B, seed):
    ch = sample_mcmc(IdentityProposal(0.8), AugmentedTarget(DW), np.array([[[1.0]], [[-1.0]]]), M, B,
                     RngStream(seed))
    assert ch.states.shape == (2, M, 1, 1)
    prev = np.concatenate([ch.x0[:, None], ch.states[:, :-1]], axis=1)
    moved = np.any(ch.states != prev, axis=(2, 3))
    assert np.array_equal(moved, ch.accepted)
    assert ch.n_accepted == moved.sum()
    assert np.all((ch.batch_index >= 0) == ch.accepted)
    assert np.all(ch.batch_index < B)


def test_all_reject_constraint_gives_copies():
    x0 = np.array([[0.3]])
    never = lambda prev, prop: np.zeros(np.shape(prop)[:-2], dtype=bool)  # noqa: E731
    ch = sample_mcmc(IdentityProposal(), AugmentedTarget(DW), x0, 50, 4, RngStream(0), constraint=never)
    assert np.all(ch.states == 0.3) and ch.n_accepted == 0 and ch.n_constraint_rejects == ch.n_proposals


def test_always_pass_constraint_changes_nothing():
    args = (IdentityProposal(), AugmentedTarget(DW), np.array([[0.3]]), 200, 3)
    a = sample_mcmc(*args, RngStream(1))
    b = sample_mcmc(*args, RngStream(1), constraint=always_pass)
    assert np.array_equal(a.states, b.states)


def test_mh_log_alpha_identity_state_and_symmetric_walk():
    flat = AugmentedTarget(Harmonic(k=0.0))
    prop = IdentityProposal()
    g = np.random.default_rng(0)
    X = (g.normal(size=(5, 2, 2)), g.normal(size=(5, 2, 2)))
    assert np.all(mh_log_alpha(AugmentedTarget(DW), prop, X, X, None) == 0.0)
    # symmetric walk on a flat target: log r = log N(zv) + log N(eps) - log N(eps) - log N(zv) = 0
    Y = (X[0] + g.normal(size=X[0].shape), g.normal(size=X[0].shape))
    assert np.allclose(mh_log_alpha(flat, prop, X, Y, None), 0.0)


def test_nonfinite_ratio_is_rejected():
    class Broken(IdentityProposal):
        def log_density(self, xp, xv, cond, types):
            return np.full(np.shape(xp)[:-2], np.nan)

    ch = sample_mcmc(Broken(), AugmentedTarget(DW), np.array([[1.0]]), 20, 2, RngStream(0))
    assert ch.n_accepted == 0 and ch.n_nonfinite == ch.n_proposals == 20


def test_sampler_aborts_with_partial_chain():
    class Failing(IdentityProposal):
        calls = 0

        def sample(self, cond, types, rng, n):
            Failing.calls += 1
            if Failing.calls > 5:
                raise FloatingPointError("boom")
            return super().sample(cond, types, rng, n)

    with pytest.raises(SamplerAborted) as info:
        sample_mcmc(Failing(), AugmentedTarget(DW), np.array([[1.0]]), 100, 2, RngStream(0))
    assert info.value.chain.states.shape[1] == 100
    assert "iteration 5" in str(info.value)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        sample_mcmc(IdentityProposal(), AugmentedTarget(DW), np.array([[1.0]]), 0, 1, RngStream(0))
    with pytest.raises(ValueError):
        explore(IdentityProposal(), DW, np.array([[1.0]]), 0, 1.0, RngStream(0))


def test_gibbs_refresh():
    s = point_system("p", 2, 3)
    st0 = State(np.ones((3, 2)), np.zeros((3, 2)), s)
    rng = RngStream(4)
    draws = []
    for k in range(2000):
        new = gibbs_refresh_aux(st0, rng.substream(k))
        assert np.array_equal(new.positions, st0.positions)
        draws.append(new.auxiliaries.ravel())
    assert stats.kstest(np.concatenate(draws), "norm").pvalue > 0.01


def test_batch_size_invariance_in_law():
    def final_states(B, seed):
        ch = sample_mcmc(IdentityProposal(0.8), AugmentedTarget(DW), np.ones((1000, 1, 1)), 150, B,
                         RngStream(seed))
        return ch.states[:, -1, 0, 0]

    assert stats.ks_2samp(final_states(1, 1), final_states(16, 2)).pvalue > 0.01


# exploration ----------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 5.0), st.integers(0, 1000))
def test_explore_never_exceeds_cutoff(du_max, seed):
    ch = explore(IdentityProposal(0.5), DW, np.array([[1.0]]), 50, du_max, RngStream(seed), n_chains=8)
    prev = np.concatenate([DW.energy(ch.x0)[:, None], ch.energies[:, :-1]], axis=1)
    assert np.all(ch.energies - prev < du_max)
    assert np.allclose(ch.energies, DW.energy(ch.states.reshape(-1, 1, 1)).reshape(ch.energies.shape))


def test_explore_extremes():
    ch = explore(IdentityProposal(), DW, np.array([[1.0]]), 30, -np.inf, RngStream(0), n_chains=4)
    assert np.all(ch.states == 1.0) and ch.n_accepted == 0
    ch = explore(IdentityProposal(), DW, np.array([[1.0]]), 2000, np.inf, RngStream(0), n_chains=4)
    assert ch.accepted.all()
    steps = np.diff(np.concatenate([ch.x0[:, None], ch.states], axis=1)[..., 0, 0], axis=1)
    assert stats.kstest(steps.ravel(), "norm").pvalue > 0.01


def test_dihedral_constraint():
    s = bead_chain((0, 1, 2, 3))
    x = build_chain(s)
    con = DihedralSignConstraint(0, 1, 2, 3)
    mirrored = x * np.array([1.0, 1.0, -1.0])
    assert np.sign(dihedral_angle(x, 0, 1, 2, 3)) != np.sign(dihedral_angle(mirrored, 0, 1, 2, 3))
    assert not con(x, mirrored)
    g = np.random.default_rng(0)
    perturbed = x + g.uniform(-0.01, 0.01, size=(10_000,) + x.shape)
    assert np.all(con(np.broadcast_to(x, perturbed.shape), perturbed))


def test_chain_round_trip(tmp_path):
    s = point_system("dw", 1)
    ch = sample_mcmc(IdentityProposal(), AugmentedTarget(DW), np.array([[1.0]]), 40, 3, RngStream(0))
    ch.save(tmp_path / "c.wmc", s)
    back = Chain.load(tmp_path / "c.wmc")
    assert np.array_equal(back.states, ch.states) and np.array_equal(back.accepted, ch.accepted)
    assert back.t_sampling == ch.t_sampling and back.n_proposals == ch.n_proposals


def test_flow_sampler_on_chain_is_deterministic():
    from warpmc.flow import ConditionalFlow, FlowConfig

    s = bead_chain((0, 1, 2, 3))
    flow = ConditionalFlow(FlowConfig(n_coupling=1, n_transformer=1, hidden=4, n_types=4))
    target = AugmentedTarget(BeadChain(s))
    a = sample_mcmc(flow, target, build_chain(s), 20, 4, RngStream(2), types=s.types_array)
    b = sample_mcmc(flow, target, build_chain(s), 20, 4, RngStream(2), types=s.types_array)
    assert np.array_equal(a.states, b.states)
