import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from twintoken import autodiff as ad
from twintoken.errors import DegenerateRowError, DimensionError, UndefinedSimilarityError

from fdcheck import assert_grads_match, scalarize

RNG = np.random.default_rng(7)


def r(*shape, lo=-2.0, hi=2.0):
    return RNG.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = ad.constant(np.eye(2))
    b = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_row_times_column():
    out = ad.matmul(ad.constant([[1.0, 0.0]]), ad.constant([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(ad.constant(r(2, 3)), ad.constant(r(2, 2)))


def test_matmul_gradient_vs_finite_differences():
    assert_grads_match(scalarize(ad.matmul), [r(3, 4), r(4, 2)])


def test_matmul_batched_gradient():
    assert_grads_match(scalarize(ad.matmul), [r(2, 3, 4), r(2, 4, 2)])


def test_matmul_broadcast_rhs_gradient():
    assert_grads_match(scalarize(ad.matmul), [r(2, 3, 4), r(4, 5)])


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetric():
    out = ad.softmax_lastdim(ad.constant([0.0, 0.0]))
    assert np.array_equal(out.data, [0.5, 0.5])


def test_softmax_masked_entry_exact_zero():
    out = ad.softmax_lastdim(ad.constant([0.0, -np.inf]))
    assert out.data[0] == 1.0 and out.data[1] == 0.0
    out = ad.softmax_lastdim(ad.constant([0.0, -ad.NEG_MASK]))
    assert out.data[0] == 1.0 and out.data[1] == 0.0


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(ad.softmax_lastdim(ad.constant(x)).data, expected, rtol=1e-15)


def test_softmax_degenerate_row():
    with pytest.raises(DegenerateRowError):
        ad.softmax_lastdim(ad.constant([-np.inf, -np.inf]))
    with pytest.raises(DegenerateRowError):
        ad.softmax_lastdim(ad.constant([[-ad.NEG_MASK, -ad.NEG_MASK], [0.0, 1.0]]))


def test_softmax_rows_sum_to_one():
    x = r(5, 7)
    y = ad.softmax_lastdim(ad.constant(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_property(x):
    y = ad.softmax_lastdim(ad.constant(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_gradient():
    assert_grads_match(scalarize(ad.softmax_lastdim), [r(3, 5)])


def test_log_softmax_gradient():
    assert_grads_match(scalarize(ad.log_softmax_lastdim), [r(3, 5)])


# ---------------------------------------------------------------------------
# stop_gradient


def test_stop_gradient_forward_identity_bitwise():
    x = ad.param(r(2, 3))
    y = ad.stop_gradient(x)
    assert np.array_equal(y.data, x.data)


def test_stop_gradient_half_product_rule():
    # y = sum(stop(x) * x); dy/dx must be x, not 2x
    x = ad.param(np.array([1.0, 2.0]))
    y = ad.sum_all(ad.mul(ad.stop_gradient(x), x))
    y.backward()
    assert np.array_equal(x.grad, [1.0, 2.0])


def test_stop_gradient_blocks_everything():
    x = ad.param(r(3))
    loss = ad.sum_all(ad.exp(ad.stop_gradient(x)))
    loss.backward()
    assert x.grad is None or np.array_equal(x.grad, np.zeros(3))


# ---------------------------------------------------------------------------
# remaining primitives: values


def test_l2_normalize_345_triangle():
    out = ad.l2_normalize_lastdim(ad.constant([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [0.6, 0.8], rtol=1e-15)


def test_l2_normalize_zero_row_raises():
    with pytest.raises(UndefinedSimilarityError):
        ad.l2_normalize_lastdim(ad.constant([[0.0, 0.0]]))


def test_layer_norm_constant_vector_is_zero_pre_affine():
    x = ad.constant(np.full((2, 6), 3.7))
    out = ad.layer_norm(x, ad.constant(np.ones(6)), ad.constant(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_add_trailing_broadcast_and_errors():
    out = ad.add(ad.constant(r(2, 3, 4)), ad.constant(r(4)))
    assert out.data.shape == (2, 3, 4)
    with pytest.raises(DimensionError):
        ad.add(ad.constant(r(2, 3)), ad.constant(r(3, 3)))
    with pytest.raises(DimensionError):
        ad.mul(ad.constant(r(2, 3)), ad.constant(r(3)))


def test_gather_rows_values():
    x = ad.constant(np.arange(12.0).reshape(4, 3))
    out = ad.gather_rows(x, [2, 0, 2])
    assert np.array_equal(out.data, x.data[[2, 0, 2]])


# ---------------------------------------------------------------------------
# remaining primitives: gradients vs central finite differences


@pytest.mark.parametrize("name,fn,arrays", [
    ("add", lambda a, b: ad.add(a, b), [r(3, 4), r(3, 4)]),
    ("add_bias", lambda a, b: ad.add(a, b), [r(3, 4), r(4)]),
    ("sub", lambda a, b: ad.sub(a, b), [r(3, 4), r(3, 4)]),
    ("mul", lambda a, b: ad.mul(a, b), [r(3, 4), r(3, 4)]),
    ("scale", lambda a: ad.scale(a, -1.7), [r(3, 4)]),
    ("exp", ad.exp, [r(3, 4)]),
    ("log", ad.log, [r(3, 4, lo=0.5, hi=2.5)]),
    ("relu", ad.relu, [r(3, 4) + np.sign(r(3, 4)) * 0.05]),
    ("gelu", ad.gelu, [r(3, 4)]),
    ("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b), [r(3, 6), r(6), r(6)]),
    ("mean", None, None),
    ("sum", None, None),
    ("l2_normalize", ad.l2_normalize_lastdim, [r(3, 4) + 3.0]),
    ("gather_rows", lambda x: ad.gather_rows(x, [1, 0, 1, 2]), [r(3, 4)]),
    ("index_select", lambda x: ad.index_select(x, 1, [2, 2, 0]), [r(2, 4, 3)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
    ("transpose", lambda x: ad.transpose(x, (1, 0, 2)), [r(2, 3, 4)]),
    ("reshape", lambda x: ad.reshape(x, (6, 2)), [r(3, 4)]),
    ("tile_rows", lambda x: ad.tile_rows(x, 5), [r(1, 4)]),
    ("pairwise_sqdist", ad.pairwise_sqdist, [r(3, 4), r(5, 4)]),
])
def test_primitive_gradients(name, fn, arrays):
    if name == "mean":
        fn, arrays = ad.mean_all, [r(3, 4)]
        assert_grads_match(fn, arrays)
        return
    if name == "sum":
        fn, arrays = ad.sum_all, [r(3, 4)]
        assert_grads_match(fn, arrays)
        return
    assert_grads_match(scalarize(fn), arrays)


def test_gradients_many_random_instances():
    # the same composed expression across 20 random draws
    for i in range(20):
        rng = np.random.default_rng(100 + i)
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 3))

        def expr(a_t, b_t):
            h = ad.gelu(ad.matmul(a_t, b_t))
            return ad.mean_all(ad.mul(h, h))

        assert_grads_match(expr, [a, b])


# ---------------------------------------------------------------------------
# determinism


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        a = ad.param(rng.uniform(-2, 2, (4, 5)))
        b = ad.param(rng.uniform(-2, 2, (5, 3)))
        out = ad.mean_all(ad.softmax_lastdim(ad.matmul(a, b)))
        out.backward()
        return float(out.data), a.grad.copy(), b.grad.copy()

    v1, ga1, gb1 = run()
    v2, ga2, gb2 = run()
    assert v1 == v2
    assert np.array_equal(ga1, ga2)
    assert np.array_equal(gb1, gb2)
