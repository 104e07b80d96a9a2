import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npbml import ad


def _grad_of(f, *xs):
    with ad.Tape() as tape:
        vs = [tape.watch(x) for x in xs]
        out = f(*vs)
        gs = ad.grad(out, vs)
    return out.item(), [g.value for g in gs]


def _check_fd(f, x, tol=1e-6):
    _, (g,) = _grad_of(f, x)
    num = ad.finite_diff(lambda a: f(ad.constant(a)).item(), x, eps=1e-6)
    np.testing.assert_allclose(g, num, rtol=tol, atol=tol)


# unary ops composed with a weighted sum so the output is scalar
UNARY = {
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "exp": ad.exp,
    "square": ad.square,
    "log": lambda v: ad.log(ad.add_scalar(ad.square(v), 0.5)),
    "sqrt": lambda v: ad.sqrt(ad.add_scalar(ad.square(v), 0.5)),
    "abs": ad.abs,
    "softmax": lambda v: ad.softmax(v, 1),
    "log_softmax": lambda v: ad.log_softmax(v, 1),
    "transpose": ad.transpose,
    "neg": ad.neg,
    "scale": lambda v: ad.scale(v, -1.7),
}

arrays = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).normal(size=(3, 4)))


@settings(max_examples=100, deadline=None)
@given(x=arrays, name=st.sampled_from(sorted(UNARY)), seed=st.integers(0, 1000))
def test_unary_vjp_matches_finite_differences(x, name, seed):
    # keep away from the kinks of relu/abs, where central differences are wrong
    if name in ("relu", "leaky_relu", "abs"):
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    w = np.random.default_rng(seed).normal(size=(4, 3) if name == "transpose" else (3, 4))
    _check_fd(lambda v: ad.sum(ad.mul(UNARY[name](v), ad.constant(w))), x)


@settings(max_examples=100, deadline=None)
@given(a=arrays, b=arrays, op=st.sampled_from(["add", "sub", "mul", "div", "matmul", "matmul_nt", "matmul_tn", "linear",
                                                  "concat"]))
def test_binary_vjp_matches_finite_differences(a, b, op):
    if op == "div":
        b = np.abs(b) + 0.5

    def f(x, y):
        if op == "matmul":
            return ad.sum(ad.square(ad.matmul(x, ad.transpose(y))))
        if op == "linear":
            return ad.sum(ad.square(ad.linear(x, y, ad.constant(np.arange(3.0)))))
        if op == "matmul_tn":
            return ad.sum(ad.square(ad.matmul_tn(x, y)))
        if op == "concat":
            return ad.sum(ad.square(ad.concat([x, y], axis=1)))
        return ad.sum(ad.square(getattr(ad, op)(x, y)))

    _, (ga, gb) = _grad_of(f, a, b)
    na = ad.finite_diff(lambda v: f(ad.constant(v), ad.constant(b)).item(), a)
    nb = ad.finite_diff(lambda v: f(ad.constant(a), ad.constant(v)).item(), b)
    np.testing.assert_allclose(ga, na, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(gb, nb, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reductions_and_structural_ops(axis):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    _check_fd(lambda v: ad.sum(ad.square(ad.mean(v, axis=axis))), x)
    _check_fd(lambda v: ad.sum(ad.square(ad.sum(v, axis=axis))), x)
    _check_fd(lambda v: ad.sum(ad.square(ad.reshape(v, (2, 6))) * ad.constant(np.arange(12.0).reshape(2, 6))), x)
    _check_fd(lambda v: ad.sum(ad.square(v[1:, ::2])), x)
    _check_fd(lambda v: ad.sum(ad.square(ad.expand(v[0], 0, 5))), x)


def test_hessian_vector_product_of_quartic_norm():
    # f(x) = |x|^4  ->  H v = 4 |x|^2 v + 8 x (x . v)
    rng = np.random.default_rng(1)
    x, v = rng.normal(size=6), rng.normal(size=6)
    with ad.Tape() as tape:
        xv = tape.watch(x)
        f = ad.square(ad.sum(ad.square(xv)))
        (g,) = ad.grad(f, [xv], create_graph=True)
        gv = ad.sum(ad.mul(g, ad.constant(v)))
        (hv,) = ad.grad(gv, [xv])
    expected = 4 * (x @ x) * v + 8 * x * (x @ v)
    np.testing.assert_allclose(hv.value, expected, rtol=1e-12)
    np.testing.assert_allclose(g.value, 4 * (x @ x) * x, rtol=1e-12)


def test_second_order_with_constant_operands():
    # f(W) = |A W B|^2 with constant A, B: the masked vjps skip the constants,
    # and the Hessian-vector product is 2 A^T A V B B^T
    rng = np.random.default_rng(2)
    a, b, w, v = rng.normal(size=(5, 3)), rng.normal(size=(4, 2)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    with ad.Tape() as tape:
        wv = tape.watch(w)
        f = ad.sum(ad.square(ad.matmul(ad.matmul(ad.constant(a), wv), ad.constant(b))))
        (g,) = ad.grad(f, [wv], create_graph=True)
        (hv,) = ad.grad(ad.sum(ad.mul(g, ad.constant(v))), [wv])
    np.testing.assert_allclose(g.value, 2 * a.T @ a @ w @ b @ b.T, rtol=1e-12)
    np.testing.assert_allclose(hv.value, 2 * a.T @ a @ v @ b @ b.T, rtol=1e-12)


def test_second_order_through_full_reductions():
    # f(x) = mean(x^2)^2 exercises the fill / sum_to adjoint pair twice
    rng = np.random.default_rng(3)
    x, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    n = x.size
    with ad.Tape() as tape:
        xv = tape.watch(x)
        f = ad.square(ad.mean(ad.square(xv)))
        (g,) = ad.grad(f, [xv], create_graph=True)
        (hv,) = ad.grad(ad.sum(ad.mul(g, ad.constant(v))), [xv])
    m = (x ** 2).mean()
    np.testing.assert_allclose(g.value, 4 * m * x / n, rtol=1e-12)
    np.testing.assert_allclose(hv.value, 8 * x * (x * v).sum() / n ** 2 + 4 * m * v / n, rtol=1e-12)


def test_third_order_derivative():
    # d^3/dx^3 of x^4 at x=1.3 is 24 x
    with ad.Tape() as tape:
        x = tape.watch(np.array([1.3]))
        y = ad.sum(ad.square(ad.square(x)))
        (g1,) = ad.grad(y, [x], create_graph=True)
        (g2,) = ad.grad(ad.sum(g1), [x], create_graph=True)
        (g3,) = ad.grad(ad.sum(g2), [x])
    assert g3.value[0] == pytest.approx(24 * 1.3, rel=1e-12)


def test_replay_is_bit_exact():
    rng = np.random.default_rng(2)
    with ad.Tape() as tape:
        x = tape.watch(rng.normal(size=(5, 3)))
        w = tape.watch(rng.normal(size=(2, 3)))
        y = ad.log_softmax(ad.linear(x, w, ad.constant(np.zeros(2))), 1)
        ad.sum(ad.exp(y))
        assert tape.replay()


def test_softmax_rows_sum_to_one():
    x = ad.constant(np.random.default_rng(3).normal(size=(7, 5)) * 30)
    s = ad.softmax(x, 1).value
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_unreachable_input_gets_zero_gradient():
    with ad.Tape() as tape:
        a, b = tape.watch(np.ones(3)), tape.watch(np.ones(2))
        ga, gb = ad.grad(ad.sum(ad.square(a)), [a, b])
    np.testing.assert_array_equal(gb.value, np.zeros(2))
    np.testing.assert_array_equal(ga.value, 2 * np.ones(3))


def test_errors():
    with ad.Tape() as tape:
        a = tape.watch(np.ones(3))
        with pytest.raises(ad.ADError):
            ad.grad(ad.square(a), [a])  # not scalar
        with pytest.raises(ad.ShapeError):
            ad.add(a, ad.constant(np.ones(4)))
        with pytest.raises(ad.DomainError):
            ad.log(ad.constant(np.array([0.0, 1.0])))
        with pytest.raises(ad.DomainError):
            ad.sqrt(ad.constant(np.array([-1.0])))
        other = ad.constant(np.ones(3))
        with pytest.raises(ad.TapeError):
            ad.grad(ad.sum(a), [other])
    with ad.Tape() as t2:
        b = t2.watch(np.ones(3))
        out = ad.sum(b)
    with pytest.raises(ad.TapeError):
        ad.grad(out, [b])  # tape closed


def test_no_record_produces_constants():
    with ad.Tape() as tape:
        a = tape.watch(np.ones(3))
        with ad.no_record():
            b = ad.square(a)
        assert b.node is None
        assert len(tape) == 1


def test_stop_gradient_blocks_flow():
    with ad.Tape() as tape:
        a = tape.watch(np.arange(3.0))
        (g,) = ad.grad(ad.sum(ad.mul(ad.stop_gradient(a), a)), [a])
    np.testing.assert_array_equal(g.value, np.arange(3.0))


def test_finite_diff_orders_agree_on_smooth_function():
    x = np.array([0.3, -1.2])
    f = lambda v: float(np.sin(v).sum() + (v ** 3).sum())  # noqa: E731
    exact = np.cos(x) + 3 * x ** 2
    np.testing.assert_allclose(ad.finite_diff(f, x, order=2), exact, rtol=1e-8)
    np.testing.assert_allclose(ad.finite_diff(f, x, eps=1e-3, order=4), exact, rtol=1e-10)
