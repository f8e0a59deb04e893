import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sqair import autodiff as ad
from sqair.autodiff import NonFiniteError, ParamRegistry, Rng, ShapeError, Tensor
from sqair.layers import MLP


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


# ---------------------------------------------------------------- forward examples

def test_logsumexp_of_logs():
    assert ad.logsumexp(Tensor([np.log(1.0), np.log(3.0)])).data == pytest.approx(np.log(4.0), abs=1e-12)


def test_elu_limits():
    assert ad.elu(Tensor(0.0)).data == 0.0
    assert ad.elu(Tensor(-50.0)).data == pytest.approx(-1.0, abs=1e-12)


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([-1.0]))


# ---------------------------------------------------------------- backward examples

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_sigmoid_at_zero():
    w = Tensor(0.0, requires_grad=True)
    ad.sigmoid(w).backward()
    assert w.grad == pytest.approx(0.25)


def test_backward_non_scalar_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_backward_accumulates():
    x = Tensor([0.5, -1.5], requires_grad=True)
    loss = (ad.tanh(x) * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first, rtol=0, atol=1e-15)


def test_mlp_gradients_match_finite_differences():
    params = ParamRegistry()
    mlp = MLP(params, "net", [5, 7, 6, 3], Rng(0))
    x = Rng(1).normal((4, 5))

    def f():
        return (ad.tanh(mlp(Tensor(x))) ** 2).sum()

    params.zero_grad()
    f().backward()
    fd = ad.finite_diff_grad(f, params, h=1e-5)
    for name, t in params.items():
        assert rel_err(t.grad, fd[name]) < 1e-5, name


# ---------------------------------------------------------------- finite differences

def test_finite_diff_square():
    params = ParamRegistry()
    th = params.add("theta", np.array(3.0))
    g = ad.finite_diff_grad(lambda: th * th, params, h=1e-4)
    assert g["theta"] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_is_zero():
    params = ParamRegistry()
    params.add("theta", np.array([1.0, 2.0]))
    g = ad.finite_diff_grad(lambda: 5.0, params)
    np.testing.assert_array_equal(g["theta"], 0.0)


def test_finite_diff_rejects_non_finite():
    params = ParamRegistry()
    params.add("theta", np.array(1.0))
    with pytest.raises(NonFiniteError):
        ad.finite_diff_grad(lambda: float("inf"), params)


# ---------------------------------------------------------------- per-op gradient properties

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "square": ad.square,
    "log_of_softplus": lambda a: ad.log(ad.softplus(a)),
    "softmax": lambda a: ad.softmax(a, axis=-1),
    "log_softmax": lambda a: ad.log_softmax(a, axis=-1),
    "logsumexp": lambda a: ad.logsumexp(a, axis=-1),
    "mean": lambda a: ad.mean(a, axis=0),
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "slice": lambda a: a[:, 1:],
    "concat": lambda a: ad.concat([a, a * 2.0], axis=0),
    "stack": lambda a: ad.stack([a, ad.exp(a)], axis=1),
}


@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=finite), op=st.sampled_from(sorted(UNARY)))
def test_unary_ops_match_finite_differences(x, op):
    f = UNARY[op]
    weights = np.linspace(0.3, 1.7, f(Tensor(x)).data.size).reshape(f(Tensor(x)).shape)
    t = Tensor(x, requires_grad=True)
    (f(t) * weights).sum().backward()
    num = numeric_grad(lambda v: float((f(Tensor(v)).data * weights).sum()), x)
    assert rel_err(t.grad, num) < 1e-4 or np.max(np.abs(t.grad - num)) < 1e-7


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.float64, (3, 1), elements=finite), b=arrays(np.float64, (1, 4), elements=st.floats(0.5, 2.0)))
def test_broadcast_binary_ops(a, b):
    for op in (ad.add, ad.sub, ad.mul, ad.div):
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        op(ta, tb).sum().backward()
        na = numeric_grad(lambda v: float(op(Tensor(v), Tensor(b)).data.sum()), a)
        nb = numeric_grad(lambda v: float(op(Tensor(a), Tensor(v)).data.sum()), b)
        np.testing.assert_allclose(ta.grad, na, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(tb.grad, nb, rtol=1e-5, atol=1e-7)


def test_elu_and_clamp_gradients_away_from_kinks():
    x = np.array([-1.3, -0.4, 0.6, 1.9])
    for f in (ad.elu, lambda a: ad.clamp(a, -1.0, 1.0)):
        t = Tensor(x, requires_grad=True)
        f(t).sum().backward()
        num = numeric_grad(lambda v: float(f(Tensor(v)).data.sum()), x)
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-9)


def test_matmul_gradient():
    a, b = Rng(3).normal((2, 3, 4)), Rng(4).normal((4, 5))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ad.tanh(ta @ tb).sum().backward()
    np.testing.assert_allclose(ta.grad, numeric_grad(lambda v: np.tanh(v @ b).sum(), a), rtol=1e-6)
    np.testing.assert_allclose(tb.grad, numeric_grad(lambda v: np.tanh(a @ v).sum(), b), rtol=1e-6)


def test_gather_and_scatter_gradients():
    x = Rng(5).normal((3, 4))
    idx = np.array([[0, 0, 3], [2, 1, 1], [3, 2, 0]])
    t = Tensor(x, requires_grad=True)
    (ad.gather(t, idx, axis=1) ** 2).sum().backward()
    num = numeric_grad(lambda v: float((np.take_along_axis(v, idx, 1) ** 2).sum()), x)
    np.testing.assert_allclose(t.grad, num, rtol=1e-6)

    t = Tensor(x, requires_grad=True)
    out = ad.scatter_rows(t, np.array([4, 0, 2]), 5)
    assert out.data[1].sum() == 0 and np.array_equal(out.data[4], x[0])
    (out * np.arange(5.0)[:, None]).sum().backward()
    np.testing.assert_array_equal(t.grad, np.array([4.0, 0.0, 2.0])[:, None] * np.ones((3, 4)))
    with pytest.raises(ValueError):
        ad.scatter_rows(t, np.array([1, 1, 2]), 5)


def test_where_routes_gradient():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([10.0, 20.0, 30.0], requires_grad=True)
    ad.where(np.array([True, False, True]), a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1, 0, 1])
    np.testing.assert_array_equal(b.grad, [0, 1, 0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3
    assert not y.requires_grad


# ---------------------------------------------------------------- registry and rng

def test_registry_order_and_errors():
    p = ParamRegistry()
    p.add("b.w", np.zeros(2))
    p.add("a.w", np.zeros((2, 2)))
    assert p.names() == ["a.w", "b.w"]
    assert p.num_params() == 6
    with pytest.raises(KeyError):
        p.add("a.w", np.zeros(1))
    with pytest.raises(ShapeError):
        p.load({"a.w": np.zeros(3), "b.w": np.zeros(2)})
    with pytest.raises(KeyError):
        p.load({"a.w": np.zeros((2, 2))})


def test_registry_digest_tracks_values():
    p = ParamRegistry()
    t = p.add("w", np.zeros(3))
    d0 = p.digest()
    t.data = t.data + 1
    assert p.digest() != d0


def test_rng_determinism_and_substreams():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal(5), b.normal(5))
    c1, c2 = Rng(7).child("x", 1), Rng(7).child("x", 2)
    assert not np.array_equal(c1.normal(5), c2.normal(5))
    np.testing.assert_array_equal(Rng(7).child("x", 1).uniform(4), Rng(7).child("x", 1).uniform(4))
