import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adsnet import diffcore as dc


def grad_of(loss_fn, params):
    dc.zero_grad(params)
    with dc.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def test_sigmoid_at_zero():
    assert dc.sigmoid(dc.Tensor([0.0])).data.tolist() == [0.5]


@pytest.mark.parametrize("c", [-7.0, 0.0, 3.5, 700.0])
def test_softmax_constant_row_is_uniform(c):
    out = dc.softmax(dc.Tensor([[c, c, c]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)


def test_bce_half_is_log_two():
    v = dc.bce(dc.Tensor([0.5]), dc.Tensor([1.0])).data[0]
    assert v == pytest.approx(math.log(2.0), abs=1e-12)
    assert v == pytest.approx(0.693147, abs=1e-6)


def test_bce_clamps_extremes():
    v = dc.bce(dc.Tensor([0.0, 1.0]), dc.Tensor([1.0, 0.0])).data
    assert np.all(np.isfinite(v))
    # 1 - 1e-12 is not exact in binary64, so the upper clamp differs slightly
    np.testing.assert_allclose(v, -math.log(1e-12), rtol=1e-5)


def test_identity_gradient():
    x = dc.Parameter([2.5], name="x")
    (g,) = grad_of(lambda: dc.sum_(x.tensor()), [x])
    assert g.tolist() == [1.0]


def test_square_sum_gradient():
    x = dc.Parameter([1.0, 2.0, 3.0], name="x")
    (g,) = grad_of(lambda: dc.sum_(x.tensor() * x.tensor()), [x])
    assert g.tolist() == [2.0, 4.0, 6.0]


def test_non_scalar_loss_rejected():
    x = dc.Parameter([1.0, 2.0])
    with dc.Tape() as tape:
        y = x.tensor() * x.tensor()
    with pytest.raises(dc.ShapeError):
        tape.backward(y)


def test_shape_mismatch_names_primitive():
    with pytest.raises(dc.ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))


def test_fd_quadratic():
    x = dc.Parameter([3.0], name="x")
    err = dc.finite_difference_check(lambda: dc.sum_(x.tensor() * x.tensor()), [x], eps=1e-6)
    assert err < 1e-8


def test_fd_constant_function():
    x = dc.Parameter([1.0, -1.0])
    err = dc.finite_difference_check(lambda: dc.Tensor(4.0), [x])
    assert err == 0.0


def test_fd_rejects_non_finite_loss():
    x = dc.Parameter([1.0])
    with pytest.raises(FloatingPointError):
        dc.finite_difference_check(lambda: dc.sum_(x.tensor()) * dc.Tensor(np.inf), [x])


def test_mlp_against_finite_differences():
    rng = np.random.default_rng(0)
    w1 = dc.Parameter(rng.normal(size=(5, 7)), "w1")
    b1 = dc.Parameter(rng.normal(size=7), "b1")
    w2 = dc.Parameter(rng.normal(size=(7, 1)), "w2")
    x = dc.Tensor(rng.uniform(-2, 2, size=(6, 5)))
    y = dc.Tensor(rng.integers(0, 2, size=(6, 1)).astype(float))

    def loss():
        h = dc.relu(x @ w1.tensor() + b1.tensor())
        return dc.mean(dc.bce(dc.sigmoid(h @ w2.tensor()), y))

    assert dc.finite_difference_check(loss, [w1, b1, w2]) < 1e-5


# Per-primitive gradient checks on random inputs in [-2, 2].

def _away_from_kink(v):
    return np.where(np.abs(v) < 1e-3, 0.5, v)


def _unary_cases(rng):
    a = rng.uniform(-2, 2, size=(3, 4))
    return {
        "relu": (lambda t: dc.relu(t), _away_from_kink(a)),
        "sigmoid": (lambda t: dc.sigmoid(t), a),
        "exp": (lambda t: dc.exp(t), a),
        "reciprocal": (lambda t: dc.reciprocal(t), np.sign(a) * (np.abs(a) + 0.5)),
        "softmax": (lambda t: dc.softmax(t), a),
        "scale": (lambda t: dc.scale(t, -1.7), a),
        "slice_cols": (lambda t: dc.slice_cols(t, 1, 3), a),
        "reshape": (lambda t: dc.reshape(t, (4, 3)), a),
        "take": (lambda t: dc.take(t, [0, 5, 5, 11]), a),
        "sum_axis0": (lambda t: dc.sum_(t, axis=0), a),
        "sum_axis1": (lambda t: dc.sum_(t, axis=1), a),
        "bce": (lambda t: dc.bce(dc.sigmoid(t), dc.Tensor((a > 0).astype(float))), a),
    }


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", ["relu", "sigmoid", "exp", "reciprocal", "softmax", "scale",
                                  "slice_cols", "reshape", "take", "sum_axis0", "sum_axis1",
                                  "bce"])
def test_unary_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    fn, value = _unary_cases(rng)[name]
    p = dc.Parameter(value, name)
    weights = dc.Tensor(rng.normal(size=fn(dc.Tensor(value)).shape))
    assert dc.finite_difference_check(lambda: dc.sum_(fn(p.tensor()) * weights), [p]) < 1e-5


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "concat", "mse",
                                  "pairwise_dots", "broadcast_add"])
def test_binary_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a = dc.Parameter(rng.uniform(-2, 2, size=(3, 4)), "a")
    shape_b = {"matmul": (4, 2), "broadcast_add": (4,)}.get(name, (3, 4))
    b = dc.Parameter(rng.uniform(-2, 2, size=shape_b), "b")
    ops = {
        "add": dc.add, "sub": dc.sub, "mul": dc.mul, "matmul": dc.matmul,
        "concat": lambda x, y: dc.concat([x, y]), "mse": dc.mse,
        "pairwise_dots": lambda x, y: dc.pairwise_dots([x, y, x * y]),
        "broadcast_add": dc.add,
    }
    fn = ops[name]
    out_shape = fn(dc.Tensor(a.value), dc.Tensor(b.value)).shape
    weights = dc.Tensor(rng.normal(size=out_shape))
    loss = lambda: dc.sum_(fn(a.tensor(), b.tensor()) * weights)
    assert dc.finite_difference_check(loss, [a, b]) < 1e-5


def test_embedding_gradient_and_touched_rows():
    rng = np.random.default_rng(1)
    table = dc.Parameter(rng.normal(size=(6, 3)), "emb", sparse=True)
    ids = np.array([4, 1, 4])
    w = dc.Tensor(rng.normal(size=(3, 3)))
    loss = lambda: dc.sum_(dc.embedding(table, ids) * w)
    (g,) = grad_of(loss, [table])
    expected = np.zeros((6, 3))
    np.add.at(expected, ids, w.data)
    np.testing.assert_allclose(g, expected, atol=1e-15)
    rows, grad_rows = table.sparse_grad()
    assert rows.tolist() == [1, 4]
    np.testing.assert_array_equal(grad_rows, expected[[1, 4]])
    table.zero_grad()
    assert not table.grad.any() and table.touched_rows().size == 0


def test_embedding_out_of_range():
    table = dc.Parameter(np.zeros((3, 2)), "emb.f_0", sparse=True)
    with pytest.raises(IndexError, match="emb.f_0.*7"):
        dc.embedding(table, [0, 7])


def test_detach_blocks_gradient():
    x = dc.Parameter([1.5, -0.5])
    (g,) = grad_of(lambda: dc.sum_(dc.detach(x.tensor()) * x.tensor()), [x])
    np.testing.assert_array_equal(g, x.value)


def test_zero_grad_clears():
    x = dc.Parameter(np.ones((2, 2)))
    grad_of(lambda: dc.sum_(x.tensor() * x.tensor()), [x])
    x.grad += 5.0
    x.zero_grad()
    assert np.all(x.grad == 0.0)


def test_tape_records_inputs_before_outputs():
    x = dc.Parameter(np.ones((2, 2)))
    with dc.Tape() as tape:
        h = dc.sigmoid(x.tensor() @ x.tensor())
        dc.sum_(h * h)
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.param is None:
                assert id(inp) in seen
        seen.add(id(node.output))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(a):
    out = dc.softmax(dc.Tensor(a)).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_accumulation_is_additive(seed):
    rng = np.random.default_rng(seed)
    x = dc.Parameter(rng.uniform(-2, 2, size=(3, 2)))
    w = dc.Tensor(rng.normal(size=(2, 2)))
    l1 = lambda: dc.sum_(dc.sigmoid(x.tensor() @ w))
    l2 = lambda: dc.mean(dc.exp(x.tensor()) * x.tensor())
    (g1,) = grad_of(l1, [x])
    (g2,) = grad_of(l2, [x])
    (g12,) = grad_of(lambda: l1() + l2(), [x])
    np.testing.assert_allclose(g1 + g2, g12, rtol=1e-12, atol=1e-14)

    dc.zero_grad([x])
    for fn in (l1, l2):
        with dc.Tape() as tape:
            loss = fn()
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, g12, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)))
def test_forward_outputs_finite(a):
    t = dc.Tensor(a)
    for kind in ("sigmoid", "softmax", "exp", "relu"):
        assert np.all(np.isfinite(dc.forward_primitive(kind, [t]).data))


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = dc.Parameter(rng.normal(size=(4, 3)))
        w = dc.Tensor(rng.normal(size=(3, 2)))
        (g,) = grad_of(lambda: dc.sum_(dc.softmax(x.tensor() @ w)), [x])
        return g.tobytes()

    assert run() == run()


def test_relu_derivative_at_zero_is_zero():
    x = dc.Parameter([0.0, 1.0, -1.0])
    (g,) = grad_of(lambda: dc.sum_(dc.relu(x.tensor())), [x])
    assert g.tolist() == [0.0, 1.0, 0.0]


def test_unknown_primitive():
    with pytest.raises(ValueError, match="nope"):
        dc.forward_primitive("nope", [1.0])
