"""Numerics: primitive correctness, gradient integrity, RNG contracts."""

import numpy as np
import pytest

import cvla.numerics as nx
from cvla.errors import ArgumentError, DimensionError, NumericError, StateError
from helpers import autodiff_grads, central_diff, check_op_gradients, projected_loss, rel_err


def t64(a, rg=False):
    return nx.tensor(np.asarray(a, dtype=np.float64), "f64", requires_grad=rg)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul_oracle(a, b):
    """Independent scalar triple loop."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_identity():
    x = t64([[5.0, 6.0], [7.0, 8.0]])
    out = nx.matmul(t64(np.eye(2)), x)
    assert np.array_equal(out.data, x.data)


def test_matmul_zero():
    x = t64([[5.0, 6.0], [7.0, 8.0]])
    out = nx.matmul(t64(np.zeros((2, 2))), x)
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_against_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    want = matmul_oracle(a, b)
    assert np.array_equal(want, np.array([[19.0, 22.0], [43.0, 50.0]]))
    assert np.array_equal(nx.matmul(t64(a), t64(b)).data, want)
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.standard_normal((rng.integers(1, 5), rng.integers(1, 5)))
        b = rng.standard_normal((a.shape[1], rng.integers(1, 5)))
        assert rel_err(nx.matmul(t64(a), t64(b)).data, matmul_oracle(a, b)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as ei:
        nx.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)


def test_dtype_mismatch_rejected():
    with pytest.raises(ArgumentError):
        nx.add(nx.tensor([1.0], "f32"), nx.tensor([1.0], "f64"))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_symmetry():
    out = nx.softmax(t64([3.7, 3.7, 3.7, 3.7]))
    assert np.allclose(out.data, 0.25, atol=1e-12)


def test_softmax_saturation():
    out = nx.softmax(nx.tensor([1e4, 0.0], "f32"))
    assert abs(out.data[0] - 1.0) < 1e-6 and out.data[1] < 1e-6


def test_softmax_closed_form():
    # exp(0) = 1, exp(ln 3) = 3 -> [1/4, 3/4]
    out = nx.softmax(t64([0.0, np.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


@pytest.mark.parametrize("dtype,tol", [("f32", 1e-6), ("f64", 1e-12)])
def test_softmax_rows_sum_to_one(dtype, tol):
    rng = np.random.default_rng(11)
    x = nx.tensor(rng.standard_normal((40, 9)) * 30, dtype)
    s = nx.softmax(x).data.sum(axis=-1)
    assert np.all(s >= 0)
    assert np.abs(s - 1.0).max() <= tol


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        nx.softmax(t64([np.nan, 1.0]))


# ---------------------------------------------------------------------------
# backward pass contracts
# ---------------------------------------------------------------------------


def test_backward_linear_map_grad_is_broadcast_of_x():
    W = t64(np.arange(12.0).reshape(4, 3), rg=True)
    x = t64([1.0, 2.0, 3.0])
    with nx.GradRecord() as rec:
        loss = nx.tsum(nx.linear(x, W))
        rec.backward(loss)
    assert np.array_equal(W.grad, np.tile(x.data, (4, 1)))


def test_backward_unreachable_leaf_gets_zero():
    W = t64(np.ones((2, 2)), rg=True)
    x = t64([1.0, 2.0], rg=True)
    with nx.GradRecord() as rec:
        _ = nx.linear(x, W)  # W participates but loss ignores it
        loss = nx.tsum(nx.mul(x, x))
        rec.backward(loss)
    assert np.array_equal(W.grad, np.zeros((2, 2)))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_twice_without_reset_is_state_error():
    x = t64([2.0], rg=True)
    with nx.GradRecord() as rec:
        loss = nx.tsum(nx.mul(x, x))
        rec.backward(loss)
        with pytest.raises(StateError):
            rec.backward(loss)


def test_backward_replay_after_reset_is_bit_identical():
    rng = np.random.default_rng(5)
    W = t64(rng.standard_normal((3, 3)), rg=True)
    x = t64(rng.standard_normal((4, 3)))
    with nx.GradRecord() as rec:
        loss = nx.tsum(nx.gelu(nx.linear(x, W)))
        rec.backward(loss)
        first = W.grad.copy()
        rec.reset()
        rec.backward(loss)
    assert np.array_equal(first, W.grad)


def test_backward_requires_scalar_and_active_record():
    x = t64([1.0, 2.0], rg=True)
    with nx.GradRecord() as rec:
        y = nx.mul(x, x)
        with pytest.raises(ArgumentError):
            rec.backward(y)
    with pytest.raises(StateError):
        nx.backward(y)


def test_backward_mlp_matches_finite_differences():
    """Random 3-layer MLP, every parameter against central differences."""
    rng = np.random.default_rng(17)
    sizes = [(5, 4), (6, 5), (3, 6)]
    Ws = [t64(rng.standard_normal(s) * 0.5, rg=True) for s in sizes]
    Bs = [t64(rng.standard_normal(s[0]) * 0.1, rg=True) for s in sizes]
    x = t64(rng.standard_normal((7, 4)))
    G = rng.standard_normal((7, 3))

    def forward():
        h = x
        for W, B in zip(Ws, Bs):
            h = nx.gelu(nx.linear(h, W, B))
        return projected_loss(h, G)

    params = Ws + Bs
    ad, _ = autodiff_grads(forward, params)
    fd = central_diff(forward, params, h=1e-4)
    for a, f in zip(ad, fd):
        assert rel_err(a, f) <= 1e-4


# ---------------------------------------------------------------------------
# per-primitive finite-difference suite (f64, >=100 instances each)
# ---------------------------------------------------------------------------


def _inputs(rng, *shapes):
    return [nx.tensor(rng.standard_normal(s), "f64", requires_grad=True) for s in shapes]


PRIMITIVE_BUILDERS = {}


def primitive(name):
    def deco(fn):
        PRIMITIVE_BUILDERS[name] = fn
        return fn

    return deco


@primitive("add")
def _b_add(rng):
    a, b = _inputs(rng, (3, 4), (4,))  # exercises bias-style broadcasting
    G = rng.standard_normal((3, 4))
    return (lambda: projected_loss(nx.add(a, b), G)), [a, b]


@primitive("sub")
def _b_sub(rng):
    a, b = _inputs(rng, (3, 4), (3, 4))
    G = rng.standard_normal((3, 4))
    return (lambda: projected_loss(nx.sub(a, b), G)), [a, b]


@primitive("mul")
def _b_mul(rng):
    a, b = _inputs(rng, (3, 4), (4,))
    G = rng.standard_normal((3, 4))
    return (lambda: projected_loss(nx.mul(a, b), G)), [a, b]


@primitive("neg")
def _b_neg(rng):
    (a,) = _inputs(rng, (2, 5))
    G = rng.standard_normal((2, 5))
    return (lambda: projected_loss(nx.neg(a), G)), [a]


@primitive("matmul")
def _b_matmul(rng):
    a, b = _inputs(rng, (2, 3, 4), (2, 4, 2))  # batched
    G = rng.standard_normal((2, 3, 2))
    return (lambda: projected_loss(nx.matmul(a, b), G)), [a, b]


@primitive("linear")
def _b_linear(rng):
    x, W, B = _inputs(rng, (2, 3, 4), (5, 4), (5,))
    G = rng.standard_normal((2, 3, 5))
    return (lambda: projected_loss(nx.linear(x, W, B), G)), [x, W, B]


@primitive("embed")
def _b_embed(rng):
    (tab,) = _inputs(rng, (6, 4))
    ids = rng.integers(0, 6, size=(2, 3))
    G = rng.standard_normal((2, 3, 4))
    return (lambda: projected_loss(nx.embed(tab, ids), G)), [tab]


@primitive("softmax")
def _b_softmax(rng):
    (x,) = _inputs(rng, (3, 5))
    G = rng.standard_normal((3, 5))
    return (lambda: projected_loss(nx.softmax(x), G)), [x]


@primitive("gelu")
def _b_gelu(rng):
    (x,) = _inputs(rng, (4, 4))
    G = rng.standard_normal((4, 4))
    return (lambda: projected_loss(nx.gelu(x), G)), [x]


@primitive("layernorm")
def _b_layernorm(rng):
    x, g, b = _inputs(rng, (3, 6), (6,), (6,))
    G = rng.standard_normal((3, 6))
    return (lambda: projected_loss(nx.layernorm(x, g, b), G)), [x, g, b]


@primitive("conv2d_s1p1")
def _b_conv_s1(rng):
    x, W, B = _inputs(rng, (1, 4, 4, 2), (3, 3, 2, 2), (2,))
    G = rng.standard_normal((1, 4, 4, 2))
    return (lambda: projected_loss(nx.conv2d(x, W, B, stride=1, padding=1), G)), [x, W, B]


@primitive("conv2d_s2")
def _b_conv_s2(rng):
    x, W, B = _inputs(rng, (1, 6, 6, 2), (2, 2, 2, 3), (3,))
    G = rng.standard_normal((1, 3, 3, 3))
    return (lambda: projected_loss(nx.conv2d(x, W, B, stride=2, padding=0), G)), [x, W, B]


@primitive("mean_pool2d")
def _b_pool(rng):
    (x,) = _inputs(rng, (2, 4, 4, 3))
    G = rng.standard_normal((2, 2, 2, 3))
    return (lambda: projected_loss(nx.mean_pool2d(x, 2), G)), [x]


@primitive("sum")
def _b_sum(rng):
    (x,) = _inputs(rng, (3, 4))
    G = rng.standard_normal((3,))
    return (lambda: projected_loss(nx.tsum(x, axis=-1), G)), [x]


@primitive("mean")
def _b_mean(rng):
    (x,) = _inputs(rng, (3, 4))
    return (lambda: nx.tmean(x)), [x]


@primitive("reshape")
def _b_reshape(rng):
    (x,) = _inputs(rng, (3, 4))
    G = rng.standard_normal((2, 6))
    return (lambda: projected_loss(nx.reshape(x, (2, 6)), G)), [x]


@primitive("swapaxes")
def _b_swap(rng):
    (x,) = _inputs(rng, (2, 3, 4))
    G = rng.standard_normal((2, 4, 3))
    return (lambda: projected_loss(nx.swapaxes(x, 1, 2), G)), [x]


@primitive("concat")
def _b_concat(rng):
    a, b = _inputs(rng, (3, 2), (3, 4))
    G = rng.standard_normal((3, 6))
    return (lambda: projected_loss(nx.concat([a, b], axis=-1), G)), [a, b]


@primitive("take")
def _b_take(rng):
    (x,) = _inputs(rng, (3, 6))
    G = rng.standard_normal((3, 3))
    return (lambda: projected_loss(nx.take(x, -1, 1, 4), G)), [x]


@pytest.mark.parametrize("name", sorted(PRIMITIVE_BUILDERS))
def test_primitive_gradients_match_finite_differences(name):
    check_op_gradients(PRIMITIVE_BUILDERS[name], n_instances=100, tol=1e-4, seed=hash(name) % 2**32)


# ---------------------------------------------------------------------------
# forward determinism
# ---------------------------------------------------------------------------


def test_forward_repeat_is_bit_identical():
    rng = np.random.default_rng(23)
    x = nx.tensor(rng.standard_normal((8, 16)), "f32")
    W = nx.tensor(rng.standard_normal((16, 16)) * 0.1, "f32")
    g = nx.tensor(np.ones(16), "f32")
    b = nx.tensor(np.zeros(16), "f32")

    def run():
        return nx.softmax(nx.layernorm(nx.gelu(nx.linear(x, W)), g, b)).data

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# RNG stream contracts
# ---------------------------------------------------------------------------


def test_gaussian_same_seed_counter_shape_is_bit_identical():
    a = nx.gaussian(nx.RngStream(42), (5, 7), "f32")
    b = nx.gaussian(nx.RngStream(42), (5, 7), "f32")
    assert np.array_equal(a.data, b.data)


def test_gaussian_counter_advances_and_resumes():
    s = nx.RngStream(9)
    first = s.normal(10)
    second = s.normal(10)
    assert not np.array_equal(first, second)
    resumed = nx.RngStream(9, counter=nx.RngStream(9).counter)
    _ = resumed  # counter starts at 0; replay full sequence instead
    s2 = nx.RngStream(9)
    assert np.array_equal(np.concatenate([first, second]), np.concatenate([s2.normal(10), s2.normal(10)]))


def test_gaussian_moments_over_one_million_draws():
    z = nx.RngStream(2024).normal(10**6)
    assert abs(z.mean()) <= 0.01
    assert abs(z.var() - 1.0) <= 0.01


def test_distinct_stream_labels_are_uncorrelated():
    base = nx.RngStream(7)
    a = base.derive("alpha").normal(10**5)
    b = base.derive("beta").normal(10**5)
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) <= 0.01


def test_integers_uniform_range():
    s = nx.RngStream(77)
    v = s.integers(20000, 3, 9)
    assert v.min() == 3 and v.max() == 8
    counts = np.bincount(v - 3, minlength=6)
    assert np.abs(counts - 20000 / 6).max() < 5 * np.sqrt(20000 / 6)
