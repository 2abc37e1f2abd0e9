import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import warpmc.diffcore as dc
from warpmc.diffcore import Tensor
from warpmc.energy import DoubleWell1D

H = 1e-6


def check_op(fn, *shapes, positive=False, seed=0, rel=1e-5):
    """Compare backward() against central differences of sum(w * fn(x))."""
    g = np.random.default_rng(seed)
    xs = [g.uniform(0.5, 2.0, s) if positive else g.normal(size=s) for s in shapes]
    out = fn(*[Tensor(x) for x in xs])
    w = g.normal(size=out.shape)

    def f(*vals):
        return float(np.sum(w * fn(*[Tensor(v) for v in vals]).value))

    ts = [Tensor(x, requires_grad=True) for x in xs]
    dc.backward(dc.tsum(dc.mul(fn(*ts), w)))
    for k, x in enumerate(xs):
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp = [v.copy() for v in xs]
            xm = [v.copy() for v in xs]
            xp[k][i] += H
            xm[k][i] -= H
            num[i] = (f(*xp) - f(*xm)) / (2 * H)
        err = np.max(np.abs(ts[k].grad - num)) / max(1.0, np.max(np.abs(num)))
        assert err < rel, (fn, k, err)


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / b, [(2, 3), (2, 3)]),
    "neg": (lambda a: -a, [(5,)]),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "affine": (lambda x, w, b: dc.affine(x, w, b), [(3, 4), (4, 2), (2,)]),
    "exp": (dc.exp, [(3, 3)]),
    "tanh": (dc.tanh, [(3, 3)]),
    "silu": (dc.silu, [(4, 2)]),
    "square": (dc.square, [(6,)]),
    "softmax": (lambda a: dc.softmax(a, axis=-1), [(3, 5)]),
    "sum_axis": (lambda a: dc.tsum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: dc.mean(a, axis=0), [(3, 4)]),
    "reshape": (lambda a: dc.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: dc.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "broadcast": (lambda a: dc.broadcast_to(a, (3, 4)), [(1, 4)]),
    "getitem": (lambda a: a[1:, ::2], [(4, 5)]),
    "concat": (lambda a, b: dc.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    check_op(fn, *shapes)


@pytest.mark.parametrize("fn", [dc.log, dc.sqrt, lambda a: dc.power(a, 1.7)])
def test_positive_domain_gradients(fn):
    check_op(fn, (3, 4), positive=True)


def test_relu_and_clip_away_from_kinks():
    x = np.array([-1.3, -0.2, 0.4, 2.0])
    t = Tensor(x, requires_grad=True)
    dc.backward(dc.tsum(dc.relu(t)))
    assert np.array_equal(t.grad, [0, 0, 1, 1])
    t = Tensor(x, requires_grad=True)
    dc.backward(dc.tsum(dc.clip(t, -0.5, 1.0)))
    assert np.array_equal(t.grad, [0, 1, 1, 0])


def test_embedding_accumulates_repeated_rows():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ids = np.array([[0, 2, 2]])
    out = dc.embedding(table, ids)
    assert np.array_equal(out.value, [[[0, 1], [4, 5], [4, 5]]])
    dc.backward(dc.tsum(out))
    assert np.array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])


def test_energy_op_uses_potential_gradient():
    pot = DoubleWell1D(barrier=2.0)
    x = np.array([[[0.3]], [[-1.1]]])
    t = Tensor(x, requires_grad=True)
    dc.backward(dc.tsum(dc.energy_op(pot, t)))
    _, g = pot.energy_and_gradient(x)
    assert np.allclose(t.grad, g)


def test_matmul_with_identity():
    a = Tensor(np.random.default_rng(1).normal(size=(4, 4)), requires_grad=True)
    out = a @ np.eye(4)
    assert np.array_equal(out.value, a.value)
    dc.backward(dc.tsum(out))
    assert np.array_equal(a.grad, np.ones((4, 4)))


def test_constant_loss_gives_zero_grads():
    store = dc.ParamStore()
    p = store.add("p", [1.0, 2.0])
    loss = dc.tsum(p * 0.0) + 3.0
    dc.backward(loss)
    assert np.array_equal(store.grads()["p"], [0.0, 0.0])


def test_sum_of_squares_gradient():
    p = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    dc.backward(dc.tsum(dc.square(p)))
    assert np.array_equal(p.grad, 2 * p.value)


def test_shared_subexpression_accumulates():
    p = Tensor(3.0, requires_grad=True)
    y = p * p
    dc.backward(y + y)
    assert p.grad == pytest.approx(12.0)


def test_cycle_is_reported():
    a = Tensor(1.0, requires_grad=True)
    b = a * 2.0
    c = b + 1.0
    b.parents = (c,)  # splice a back edge
    with pytest.raises(dc.GraphError):
        dc.backward(c)


def test_nonscalar_backward_needs_seed():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        dc.backward(a * 2.0)


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(2), requires_grad=True)
    with dc.no_grad():
        b = a * 3.0
    assert not b.requires_grad and b.parents == ()


def test_broadcast_mismatch_raises():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_unbroadcast_sums_to_shape(vals):
    g = np.tile(np.array(vals), (4, 1))
    assert np.allclose(dc.unbroadcast(g, (len(vals),)), 4 * np.array(vals))
    assert dc.unbroadcast(g, (1, len(vals))).shape == (1, len(vals))


# Adam ------------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    store = dc.ParamStore()
    p = store.add("w", [1.0, -1.0])
    opt = dc.Adam(store, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.value, [1.0, -1.0])


def test_adam_first_step_moves_by_lr():
    store = dc.ParamStore()
    p = store.add("w", [1.0, -1.0, 0.0])
    opt = dc.Adam(store, lr=0.01)
    p.grad = np.array([3.0, -0.2, 1e-3])
    opt.step()
    assert np.allclose(p.value - [1.0, -1.0, 0.0], [-0.01, 0.01, -0.01], atol=1e-7)


def test_adam_descends_quadratic_bowl():
    store = dc.ParamStore()
    p = store.add("w", [2.0, -3.0])
    opt = dc.Adam(store, lr=0.05)
    losses = []
    for _ in range(300):
        store.zero_grad()
        loss = dc.tsum(dc.square(p))
        dc.backward(loss)
        opt.step()
        losses.append(float(loss.value))
    assert losses[-1] < 1e-2 * losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses[:50], losses[1:50]))


def test_adam_reports_nonfinite_parameter():
    store = dc.ParamStore()
    store.add("good", [1.0])
    bad = store.add("layer.bad", [1.0])
    opt = dc.Adam(store)
    bad.grad = np.array([np.nan])
    with pytest.raises(dc.NonFiniteGradient, match="layer.bad"):
        opt.step()


def test_duplicate_parameter_name():
    store = dc.ParamStore()
    store.add("a", 1.0)
    with pytest.raises(KeyError):
        store.add("a", 2.0)


def test_clip_grad_norm():
    store = dc.ParamStore()
    a, b = store.add("a", [0.0, 0.0]), store.add("b", [0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert dc.clip_grad_norm(store, 10.0) == pytest.approx(5.0)
    assert np.array_equal(a.grad, [3.0, 0.0])
    assert dc.clip_grad_norm(store, 1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.0]) and np.allclose(b.grad, [0.8])


def test_checkpoint_round_trip(tmp_path):
    store = dc.ParamStore()
    p = store.add("w", np.arange(6.0).reshape(2, 3))
    store.add("b", [0.5])
    opt = dc.Adam(store, lr=0.01)
    p.grad = np.ones((2, 3))
    opt.step()
    path = tmp_path / "ck.wmc"
    sha = dc.save_checkpoint(path, store, {"note": "x"}, optimizer=opt)

    fresh = dc.ParamStore()
    fresh.add("w", np.zeros((2, 3)))
    fresh.add("b", [0.0])
    opt2 = dc.Adam(fresh)
    meta = dc.load_checkpoint(path, fresh, opt2, expected_sha256=sha)
    assert meta["note"] == "x"
    assert np.array_equal(fresh.flat(), store.flat())
    assert opt2.t == 1 and np.array_equal(opt2.m["w"], opt.m["w"])
    with pytest.raises(ValueError, match="hash"):
        dc.load_checkpoint(path, fresh, expected_sha256="0" * 64)


def test_load_state_dict_rejects_mismatch():
    store = dc.ParamStore()
    store.add("w", [1.0, 2.0])
    with pytest.raises(KeyError):
        store.load_state_dict({"v": np.zeros(2)})
    with pytest.raises(ValueError):
        store.load_state_dict({"w": np.zeros(3)})
