import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from warpmc.flow import (ConditionalFlow, FlowConfig, attention_weights, coupling_forward, coupling_inverse,
                         gaussian_logpdf_sum)
from warpmc.core import RngStream
from warpmc.diffcore import Tensor


def random_flow(d=3, seed=0, **kw):
    cfg = FlowConfig(dimension=d, n_coupling=2, n_transformer=1, hidden=8, embed=4, n_types=5,
                     lengthscales=(0.5, 1.5), zero_init_output=False, output_init_scale=0.5, init_seed=seed, **kw)
    return ConditionalFlow(cfg)


def inputs(N=4, d=3, S=3, seed=1):
    g = np.random.default_rng(seed)
    return (g.normal(size=(S, N, d)), g.normal(size=(S, N, d)), g.normal(size=(S, N, d)) * 1.5,
            g.integers(0, 5, size=N))


def test_zero_init_is_identity_plus_skip():
    flow = ConditionalFlow(FlowConfig(dimension=2, n_coupling=2, n_transformer=1, hidden=8, n_types=4))
    zp, zv, cond, _ = inputs(N=3, d=2)
    xp, xv, ld = flow.forward(zp, zv, cond, [0, 1, 2])
    assert np.allclose(xp, cond + zp) and np.allclose(xv, zv) and np.allclose(ld, 0.0)


def test_round_trip_and_logdet_sign():
    flow = random_flow()
    zp, zv, cond, types = inputs()
    xp, xv, ld = flow.forward(zp, zv, cond, types)
    assert not np.allclose(xp, cond + zp)  # the flow really does something
    zp2, zv2, ild = flow.inverse(xp, xv, cond, types)
    assert np.allclose(zp2, zp, atol=1e-10) and np.allclose(zv2, zv, atol=1e-10)
    assert np.allclose(ild, -ld, atol=1e-10)


def test_single_layer_round_trip():
    flow = random_flow()
    zp, zv, cond, types = inputs()
    a, b, ld = coupling_forward(flow.layers[0], zp, zv, cond, types)
    c, e, ild = coupling_inverse(flow.layers[0], a, b, cond, types)
    assert np.allclose(c, zp) and np.allclose(e, zv) and np.allclose(ld, -ild)


def test_logdet_matches_numerical_jacobian():
    flow = random_flow(d=2, seed=3)
    N, d = 3, 2
    zp, zv, cond, types = inputs(N=N, d=d, S=1, seed=4)
    z = np.concatenate([zp.ravel(), zv.ravel()])

    def f(vec):
        a, b, _ = flow.forward(vec[:N * d].reshape(1, N, d), vec[N * d:].reshape(1, N, d), cond, types)
        return np.concatenate([a.ravel(), b.ravel()])

    h = 1e-6
    J = np.stack([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(z.size)], axis=1)
    _, _, ld = flow.forward(zp, zv, cond, types)
    assert np.linalg.slogdet(J)[1] == pytest.approx(float(ld[0]), abs=1e-6)


def test_log_density_is_change_of_variables():
    flow = random_flow()
    zp, zv, cond, types = inputs()
    xp, xv, ld = flow.forward(zp, zv, cond, types)
    base = gaussian_logpdf_sum(Tensor(zp), Tensor(zv)).value
    assert np.allclose(flow.log_density(xp, xv, cond, types), base - ld, atol=1e-9)


def test_sample_log_density_agrees():
    flow = random_flow()
    _, _, cond, types = inputs(S=1)
    xp, xv, lp = flow.sample(cond[0], types, RngStream(5), n=6)
    assert xp.shape == (6, 4, 3) and lp.shape == (6,)
    assert np.allclose(flow.log_density(xp, xv, cond[0], types), lp, atol=1e-9)


def test_batched_sample_shapes():
    flow = random_flow()
    _, _, cond, types = inputs(S=3)
    xp, xv, lp = flow.sample(cond, types, RngStream(0), n=2)
    assert xp.shape == (3, 2, 4, 3) and lp.shape == (3, 2)


@settings(max_examples=15, deadline=None)
@given(st.permutations(list(range(4))), st.integers(0, 1000))
def test_permutation_equivariance(perm, seed):
    flow = random_flow()
    zp, zv, cond, types = inputs(seed=seed)
    perm = np.array(perm)
    xp, xv, ld = flow.forward(zp, zv, cond, types)
    xp2, xv2, ld2 = flow.forward(zp[:, perm], zv[:, perm], cond[:, perm], types[perm])
    assert np.allclose(xp2, xp[:, perm], atol=1e-10) and np.allclose(xv2, xv[:, perm], atol=1e-10)
    assert np.allclose(ld2, ld, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_translation_invariance(shift):
    flow = random_flow()
    zp, zv, cond, types = inputs()
    xp, xv, _ = flow.forward(zp, zv, cond, types)
    s = np.array(shift)
    assert np.allclose(flow.log_density(xp + s, xv, cond + s, types), flow.log_density(xp, xv, cond, types),
                       atol=1e-8)


def test_no_canonicalisation_breaks_translation_invariance():
    flow = random_flow(canonicalize=False)
    zp, zv, cond, types = inputs()
    xp, xv, _ = flow.forward(zp, zv, cond, types)
    assert not np.allclose(flow.log_density(xp + 3.0, xv, cond + 3.0, types),
                           flow.log_density(xp, xv, cond, types))


def test_attention_weights_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(2, 5, 3)) * 10
    w = attention_weights(x, 0.3)
    assert np.allclose(w.sum(-1), 1.0) and np.all(w >= 0)
    assert np.allclose(np.diagonal(w, axis1=-2, axis2=-1), np.max(w, axis=-1))
    with pytest.raises(ValueError):
        attention_weights(x, 0.0)


def test_bad_type_ids():
    flow = random_flow()
    zp, zv, cond, _ = inputs()
    with pytest.raises(ValueError):
        flow.forward(zp, zv, cond, [0, 1, 2, 7])


def test_identity_flow_samples_are_gaussian():
    flow = ConditionalFlow(FlowConfig(dimension=2, n_coupling=2, n_transformer=1, hidden=8, n_types=4))
    cond = np.array([[0.0, 1.0], [2.0, -1.0]])
    xp, xv, _ = flow.sample(cond, [0, 1], RngStream(11), n=4000)
    for col in ((xp - cond).reshape(4000, -1).T.tolist() + xv.reshape(4000, -1).T.tolist()):
        assert stats.kstest(col, "norm").pvalue > 1e-3


def test_save_load(tmp_path):
    flow = random_flow()
    sha = flow.save(tmp_path / "f.wmc", {"stage": "x"})
    flow2, meta = ConditionalFlow.load(tmp_path / "f.wmc", expected_sha256=sha)
    assert meta["stage"] == "x"
    zp, zv, cond, types = inputs()
    assert np.array_equal(flow.forward(zp, zv, cond, types)[0], flow2.forward(zp, zv, cond, types)[0])


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(lengthscales=(0.1, -1.0))
    with pytest.raises(ValueError):
        FlowConfig(n_coupling=0)
