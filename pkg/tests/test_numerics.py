import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relguide import numerics as nx
from relguide.numerics import Rng, Tensor, grad_check


def test_clip_relu_hinge_examples():
    assert nx.elementwise("clip", [-2.0, 0.3, 2.0], lo=-1, hi=1).data.tolist() == [-1.0, 0.3, 1.0]
    assert nx.elementwise("relu", [-0.1, 0.0, 0.1]).data.tolist() == [0.0, 0.0, 0.1]
    hinge = nx.elementwise("max", [0.0], [0.7 - 0.6]).data[0]
    assert hinge == pytest.approx(0.1, abs=1e-15)


def test_elementwise_errors():
    with pytest.raises(nx.ShapeError):
        nx.elementwise("add", np.ones(3), np.ones(4))
    with pytest.raises(nx.DomainError):
        nx.elementwise("log", [1.0, 0.0])
    with pytest.raises(nx.DomainError):
        nx.elementwise("log", [-1.0])
    with pytest.raises(nx.DomainError):
        nx.elementwise("div", [1.0, 2.0], [1.0, 0.0])
    with pytest.raises(nx.NumericsError):
        nx.elementwise("cosh", [1.0])


def test_reduce_examples():
    assert nx.reduce("l2norm", [3.0, 4.0]).data == 5.0
    assert nx.reduce("linfnorm", [3.0, -4.0]).data == 4.0
    assert nx.reduce("mean", [1.0, 1.0, 3.0, 3.0]).data == 2.0
    assert nx.reduce("sum", np.ones((2, 3)), axes=1).data.tolist() == [3.0, 3.0]
    assert nx.reduce("max", np.array([[1.0, 5.0], [7.0, 2.0]]), axes=0).data.tolist() == [7.0, 5.0]


def test_reduce_empty_axis():
    with pytest.raises(nx.ShapeError):
        nx.reduce("sum", np.zeros((0, 3)), axes=0)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    out = nx.softmax([10.0, -1e9, 10.0], mask=[True, False, True]).data
    assert out.tolist() == [0.5, 0.0, 0.5]
    with pytest.raises(nx.NumericsError):
        nx.softmax([1.0, 2.0], mask=[False, False])


def test_softmax_matches_naive():
    rng = Rng(3)
    for _ in range(100):
        x = rng.normal(9, scale=5.0)
        ref = np.array([math.exp(v) for v in x])
        ref /= ref.sum()
        np.testing.assert_allclose(nx.softmax(x).data, ref, rtol=0, atol=1e-12)


@settings(max_examples=1000, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-1e3, 1e3),
)
def test_softmax_properties(vals, shift):
    x = np.array(vals)
    p = nx.softmax(x).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(nx.softmax(x + shift).data, p, rtol=0, atol=1e-12)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.data())
def test_ravel_unravel_roundtrip(shape, data):
    shape = tuple(shape)
    coords = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
    flat = nx.ravel_index(coords, shape)
    assert tuple(int(c) for c in nx.unravel_index(flat, shape)) == coords
    assert flat == np.ravel_multi_index(coords, shape)


def test_rng_reproducible_and_split():
    a, b = Rng(42, stream=7), Rng(42, stream=7)
    assert a.normal(64).tobytes() == b.normal(64).tobytes()
    c = Rng(42, stream=8)
    assert not np.array_equal(Rng(42, stream=7).normal(64), c.normal(64))
    s1, s2 = Rng(1).split(0), Rng(1).split(1)
    x, y = s1.normal(20000), s2.normal(20000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


def test_grad_check_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, 4.0]
    rep = grad_check(lambda p: nx.sum_(p[0] * p[0]), [Tensor([1.0, 2.0])])
    assert rep.passed and rep.worst < 1e-9


def test_grad_check_non_finite_loss():
    with pytest.raises(nx.DomainError):
        grad_check(lambda p: nx.sum_(p[0]) * np.inf, [Tensor([1.0])])


def test_grad_check_detects_wrong_gradient():
    def bad_square(a):
        a = nx.as_tensor(a)
        return nx._make(a.data**2, (a,), lambda g: nx._acc(a, g * a.data))  # missing factor 2

    rep = grad_check(lambda p: nx.sum_(bad_square(p[0])), [Tensor([1.0, 2.0])])
    assert not rep.passed


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


# (name, builder(rng) -> (f, params)) for every gradient-bearing primitive
def _cases():
    def unary(op, make=None):
        def build(r):
            x = (make or (lambda r: r.normal((3, 4))))(r)
            return (lambda p: nx.sum_(op(p[0]) * w)), [x]

        w = np.linspace(0.3, 1.7, 12).reshape(3, 4)
        return build

    def binary(op, make_b=None):
        def build(r):
            a = r.normal((3, 4))
            b = (make_b or (lambda r: r.normal((3, 4))))(r)
            return (lambda p: nx.sum_(op(p[0], p[1]) * w)), [a, b]

        w = np.linspace(-1.0, 1.2, 12).reshape(3, 4)
        return build

    def away_from_zero(r):
        x = r.normal((3, 4))
        return np.where(np.abs(x) < 0.1, 0.5, x)

    def softmax_masked(r):
        x = r.normal((4, 5))
        mask = r.random((4, 5)) < 0.7
        mask[:, 0] = True
        w = r.normal((4, 5))
        return (lambda p: nx.sum_(nx.softmax(p[0], axis=1, mask=mask) * w)), [x]

    def conv(r):
        x, k, b = r.normal((5, 6, 2)), r.normal((3, 3, 2, 3)), r.normal(3)
        return (lambda p: nx.sum_(nx.tanh(nx.conv2d(p[0], p[1], p[2])))), [x, k, b]

    def gather(r):
        a = r.normal((6, 3))
        idx = r.integers(0, 6, (4, 5))
        idx.setflags(write=False)
        w = r.normal((4, 5, 3))
        return (lambda p: nx.sum_(nx.gather_rows(p[0], idx) * w)), [a]

    def bdot(r):
        a, b = r.normal((4, 3)), r.normal((4, 5, 3))
        return (lambda p: nx.sum_(nx.tanh(nx.batched_dot(p[0], p[1])))), [a, b]

    def bcomb(r):
        a, b = r.normal((4, 5)), r.normal((4, 5, 3))
        return (lambda p: nx.sum_(nx.tanh(nx.batched_combine(p[0], p[1])))), [a, b]

    def einsum(r):
        a, b = r.normal((3, 4)), r.normal((4, 2))
        return (lambda p: nx.sum_(nx.tanh(nx.einsum("ij,jk->ik", p[0], p[1])))), [a, b]

    def matmul(r):
        a, b = r.normal((3, 4)), r.normal((4, 2))
        return (lambda p: nx.sum_(nx.tanh(nx.matmul(p[0], p[1])))), [a, b]

    def shapes(r):
        a = r.normal((2, 3, 4))
        w = r.normal((4, 6))
        v = r.normal((2, 3, 4))

        def f(p):
            moved = nx.sum_(nx.transpose(p[0], (2, 0, 1)).reshape(4, 6) * w)
            picked = nx.sum_(nx.getitem(p[0], (slice(None), np.array([0, 2, 2]))) * v)  # repeated index
            return moved + picked

        return f, [a]

    def cat(r):
        a, b = r.normal((2, 3)), r.normal((2, 2))
        w = r.normal((2, 5))
        return (lambda p: nx.sum_(nx.concat([p[0], p[1]], axis=1) * w)), [a, b]

    def reductions(r):
        a = r.normal((3, 4))
        return (lambda p: nx.sum_(nx.l2norm(p[0], axis=1)) + nx.sum_(nx.linfnorm(p[0], axis=0))
                + nx.mean(p[0]) * 3.0 + nx.sum_(nx.amax(p[0], axis=1))), [a]

    def xlogx(r):
        return (lambda p: nx.sum_(nx.xlogx(p[0]))), [r.uniform(0.1, 2.0, (3, 4))]

    return {
        "add": binary(nx.add), "sub": binary(nx.sub), "mul": binary(nx.mul),
        "div": binary(nx.div, away_from_zero), "max": binary(nx.maximum),
        "exp": unary(nx.exp), "log": unary(nx.log, lambda r: _positive(r, (3, 4))),
        "sqrt": unary(nx.sqrt, lambda r: _positive(r, (3, 4))), "tanh": unary(nx.tanh),
        "relu": unary(nx.relu, away_from_zero), "abs": unary(nx.abs_, away_from_zero),
        "clip": unary(lambda x: nx.clip(x, -0.8, 0.8)),
        "softmax": softmax_masked, "conv2d": conv, "gather_rows": gather, "batched_dot": bdot,
        "batched_combine": bcomb, "einsum": einsum, "matmul": matmul, "reshape_transpose_getitem": shapes,
        "concat": cat, "reductions": reductions, "xlogx": xlogx,
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_primitive_gradients_50_seeds(name):
    build = _cases()[name]
    for seed in range(50):
        f, params = build(Rng(seed, stream=0x99))
        rep = grad_check(f, [Tensor(p) for p in params])
        assert rep.passed, f"{name} seed {seed}: worst {rep.worst:.2e}"


def test_conv2d_matches_loops():
    rng = Rng(5)
    x, w, b = rng.normal((5, 4, 2)), rng.normal((3, 3, 2, 3)), rng.normal(3)
    out = nx.conv2d(x, w, b).data
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 4, 3))
    for i in range(5):
        for j in range(4):
            ref[i, j] = np.einsum("abc,abcd->d", pad[i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_bilinear_resize_identity_and_constant():
    rng = Rng(2)
    a = rng.normal((4, 5, 3))
    assert np.array_equal(nx.bilinear_resize(a, 4, 5), a)
    c = np.full((3, 3, 2), 1.5)
    np.testing.assert_allclose(nx.bilinear_resize(c, 12, 7), 1.5, rtol=0, atol=1e-15)


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.data.size == int(np.prod(t.shape))
    assert t.data.dtype == np.float64
    with pytest.raises(nx.ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()
