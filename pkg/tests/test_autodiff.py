import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meatrd import autodiff as ad
from meatrd.autodiff import Tensor, finite_difference_check

RNG = np.random.default_rng(1234)


def weighted(op, shape_out_seed=0):
    """Scalarise ``op`` with fixed random weights so no gradient is trivially zero."""
    cache = {}

    def f(x):
        y = op(x)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(shape_out_seed).normal(size=y.shape)
        return ad.sum_(y * cache["w"])

    return f


B = RNG.normal(size=(4, 3))
POS = RNG.uniform(0.5, 2.0, size=(3, 4))
SEG = np.array([0, 0, 1, 2, 2, 2])
IDX = np.array([2, 0, 2, 1, 3])

# (name, op, input)
UNARY_CASES = [
    ("add", lambda x: x + B.T, RNG.normal(size=(3, 4))),
    ("add_broadcast", lambda x: x + Tensor(B[:1].T), RNG.normal(size=(3, 4))),
    ("sub", lambda x: Tensor(B.T) - x, RNG.normal(size=(3, 4))),
    ("mul", lambda x: x * x, RNG.normal(size=(3, 4))),
    ("div_num", lambda x: x / Tensor(POS), RNG.normal(size=(3, 4))),
    ("div_den", lambda x: Tensor(B.T) / x, POS),
    ("neg", lambda x: -x, RNG.normal(size=(5,))),
    ("power", lambda x: ad.power(x, 1.7), POS),
    ("power_int", lambda x: x ** 3, RNG.normal(size=(6,))),
    ("exp", ad.exp, RNG.normal(size=(3, 4))),
    ("log", ad.log, POS),
    ("abs", ad.abs_, RNG.uniform(0.2, 1.0, size=7) * np.sign(RNG.normal(size=7))),
    ("leaky_relu", ad.leaky_relu, RNG.uniform(0.1, 1.0, size=8) * np.sign(RNG.normal(size=8))),
    ("sigmoid", ad.sigmoid, RNG.normal(size=(2, 5))),
    ("sum_axis", lambda x: ad.sum_(x, axis=1), RNG.normal(size=(3, 4))),
    ("sum_keepdims", lambda x: ad.sum_(x, axis=0, keepdims=True) * x, RNG.normal(size=(3, 4))),
    ("mean", lambda x: ad.mean(x, axis=0) * 3.0, RNG.normal(size=(3, 4))),
    ("reshape", lambda x: ad.reshape(x, (4, 3)) @ Tensor(B.T), RNG.normal(size=(3, 4))),
    ("transpose", lambda x: ad.transpose(x) @ Tensor(POS), RNG.normal(size=(3, 4))),
    ("concat", lambda x: ad.concat([x, x * 2.0, Tensor(B.T)], axis=1), RNG.normal(size=(3, 2))),
    ("index_rows", lambda x: ad.index_rows(x, IDX), RNG.normal(size=(4, 3))),
    ("segment_sum", lambda x: ad.segment_sum(x, SEG, 3), RNG.normal(size=(6, 2))),
    ("segment_softmax", lambda x: ad.segment_softmax(x, SEG, 3), RNG.normal(size=(6, 2))),
    ("softmax", lambda x: ad.softmax(x, axis=1), RNG.normal(size=(3, 5))),
    ("l2_norm", lambda x: ad.l2_norm(x, axis=1), RNG.normal(size=(3, 4))),
    ("l2_norm_eps", lambda x: x / ad.l2_norm(x, axis=1, eps=1e-12), RNG.normal(size=(3, 4))),
    ("matmul_left", lambda x: x @ Tensor(B), RNG.normal(size=(2, 4))),
    ("matmul_right", lambda x: Tensor(B) @ x, RNG.normal(size=(3, 5))),
    ("matmul_batched", lambda x: x @ ad.transpose(x, (0, 2, 1)), RNG.normal(size=(2, 3, 4))),
]

W_CONV = RNG.normal(size=(3, 2, 3, 3))
W_TCONV = RNG.normal(size=(2, 3, 4, 4))
X_CONV = RNG.normal(size=(2, 2, 5, 5))
X_TCONV = RNG.normal(size=(1, 2, 3, 3))
CONV_CASES = [
    ("conv2d_x", lambda x: ad.conv2d(x, Tensor(W_CONV), stride=1, padding=1), RNG.normal(size=(2, 2, 5, 5))),
    ("conv2d_stride2", lambda x: ad.conv2d(x, Tensor(W_CONV), stride=2, padding=1), RNG.normal(size=(1, 2, 6, 6))),
    ("conv2d_w", lambda w: ad.conv2d(Tensor(X_CONV), w, padding=0), W_CONV),
    ("conv2d_b", lambda b: ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(W_CONV), b, padding=1),
     RNG.normal(size=3)),
    ("tconv_x", lambda x: ad.conv_transpose2d(x, Tensor(W_TCONV), stride=2, padding=1), RNG.normal(size=(2, 2, 3, 3))),
    ("tconv_w", lambda w: ad.conv_transpose2d(Tensor(X_TCONV), w, stride=2, padding=1),
     W_TCONV),
    ("tconv_b", lambda b: ad.conv_transpose2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(W_TCONV), b, stride=2, padding=1),
     RNG.normal(size=3)),
]


@pytest.mark.parametrize("name,op,x", UNARY_CASES + CONV_CASES, ids=[c[0] for c in UNARY_CASES + CONV_CASES])
def test_op_gradient_matches_finite_differences(name, op, x):
    assert finite_difference_check(weighted(op), x) <= 1e-4


def test_matmul_identity():
    A = RNG.normal(size=(3, 5))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(A)).data, A)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))


def test_leaky_relu_slope():
    assert ad.leaky_relu(Tensor(-1.0), 0.01).item() == pytest.approx(-0.01)


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_gradient():
    x = Tensor(RNG.normal(size=5), requires_grad=True)
    ad.backward(ad.sum_(ad.softmax(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_quadratic_check_is_tight():
    assert finite_difference_check(lambda x: ad.sum_(x * x), np.array([1.0, 2.0])) <= 1e-6


def test_backward_accumulates():
    x = Tensor(2.0, requires_grad=True)
    ad.backward(x * 3.0)
    ad.backward(x * 3.0)
    assert x.grad == pytest.approx(6.0)
    x.zero_grad()
    assert x.grad == 0.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    gx, gu = ad.grad(ad.sum_(x * x), [x, unused])
    np.testing.assert_array_equal(gu, np.zeros(2))
    np.testing.assert_array_equal(gx, 2 * np.ones(3))


def test_non_finite_output_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor(np.array([0.0, 1.0])))


@pytest.mark.parametrize("op", [
    lambda: Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3))),
    lambda: ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3)))),
    lambda: ad.conv_transpose2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 2, 2)))),
])
def test_shape_mismatch_raises(op):
    with pytest.raises(ValueError):
        op()


def test_evaluation_is_bit_identical():
    x = RNG.normal(size=(2, 2, 6, 6))

    def run():
        t = Tensor(x, requires_grad=True)
        y = ad.sum_(ad.leaky_relu(ad.conv2d(t, Tensor(W_CONV[:, :2]), padding=1)) ** 2)
        ad.backward(y)
        return y.data.copy(), t.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_conv_transpose_output_size():
    y = ad.conv_transpose2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((2, 5, 4, 4))), stride=2, padding=1)
    assert y.shape == (1, 5, 8, 8)


def test_conv2d_matches_direct_loop():
    x = RNG.normal(size=(1, 2, 5, 5))
    w = RNG.normal(size=(3, 2, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=0).data
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(got, ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(1, 3))
def test_segment_softmax_rows_sum_to_one(vals, n_seg):
    seg = np.arange(len(vals)) % n_seg
    out = ad.segment_softmax(Tensor(np.array(vals)[:, None]), seg, n_seg).data[:, 0]
    sums = np.bincount(seg, weights=out, minlength=n_seg)
    np.testing.assert_allclose(sums[np.bincount(seg, minlength=n_seg) > 0], 1.0, atol=1e-12)
