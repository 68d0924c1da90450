import numpy as np
import pytest

from arenatraj import tape as tp


def test_square_sum_gradient_oracle():
    t = tp.Tape()
    x = t.leaf(np.array([1.0, 2.0, 3.0]))
    t.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_dot_product_gradients():
    t = tp.Tape()
    x = t.leaf(np.array([1.0, 0.0]))
    y = t.leaf(np.array([0.0, 1.0]))
    t.backward(tp.mul(x, y).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    np.testing.assert_array_equal(y.grad, [1.0, 0.0])


def test_mean_gradient_is_one_over_n():
    t = tp.Tape()
    z = t.leaf(np.array([3.0, -1.0, 2.0, 8.0]))
    t.backward(z.mean())
    np.testing.assert_array_equal(z.grad, [0.25, 0.25, 0.25, 0.25])


def test_softmax_rows_sum_to_one():
    t = tp.Tape()
    x = t.const(np.random.default_rng(3).normal(size=(5, 7)) * 10)
    s = tp.softmax(x)
    np.testing.assert_allclose(s.value.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_single_element_is_exactly_one_with_zero_grad():
    t = tp.Tape()
    x = t.leaf(np.array([[2.7]]))
    s = tp.softmax(x)
    assert s.value[0, 0] == 1.0
    t.backward(s.sum())
    np.testing.assert_array_equal(x.grad, [[0.0]])


def test_sigmoid_at_zero():
    t = tp.Tape()
    x = t.leaf(np.array([0.0]))
    s = tp.sigmoid(x)
    assert s.value[0] == 0.5
    t.backward(s.sum())
    np.testing.assert_allclose(x.grad, [0.25], atol=1e-15)


def test_l2_normalize_unit_norm():
    t = tp.Tape()
    x = t.const(np.random.default_rng(5).normal(size=(6, 4)))
    y = tp.l2_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(y.value, axis=-1), 1.0, atol=1e-9)


def test_l2_normalize_zero_row_passthrough_warns():
    t = tp.Tape()
    x = t.leaf(np.array([[0.0, 0.0], [3.0, 4.0]]))
    with pytest.warns(UserWarning, match="zero-norm"):
        y = tp.l2_normalize(x)
    np.testing.assert_array_equal(y.value[0], [0.0, 0.0])
    np.testing.assert_allclose(y.value[1], [0.6, 0.8])


def test_broadcast_bias_add_adjoint():
    t = tp.Tape()
    x = t.leaf(np.ones((3, 4)))
    b = t.leaf(np.zeros(4))
    t.backward((x + b).sum())
    np.testing.assert_array_equal(b.grad, [3.0, 3.0, 3.0, 3.0])
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_matmul_shape_error_names_op_and_shapes():
    t = tp.Tape()
    a = t.const(np.ones((2, 3)))
    b = t.const(np.ones((4, 2)))
    with pytest.raises(tp.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        tp.matmul(a, b)


def test_add_shape_error():
    t = tp.Tape()
    with pytest.raises(tp.ShapeError, match="add"):
        tp.add(t.const(np.ones((2, 3))), t.const(np.ones((4,))))


def test_log_domain_error():
    t = tp.Tape()
    with pytest.raises(tp.DomainError):
        tp.log(t.const(np.array([1.0, 0.0])))


def test_div_by_zero_domain_error():
    t = tp.Tape()
    with pytest.raises(tp.DomainError):
        tp.div(t.const(np.array([1.0])), t.const(np.array([0.0])))


def test_exp_overflow_raises_non_finite():
    t = tp.Tape()
    with pytest.raises(tp.NonFiniteError):
        tp.exp(t.const(np.array([1e4])))


def test_nan_input_rejected_at_const():
    t = tp.Tape()
    with pytest.raises(tp.NonFiniteError):
        t.const(np.array([np.nan]))


def test_backward_requires_scalar_loss():
    t = tp.Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        t.backward(x * 2.0)


def test_gather_out_of_range_rejected():
    t = tp.Tape()
    table = t.leaf(np.ones((4, 2)))
    with pytest.raises(IndexError):
        tp.gather(table, np.array([4]))


def test_gather_accumulates_repeated_indices():
    t = tp.Tape()
    table = t.leaf(np.zeros((3, 2)))
    out = tp.gather(table, np.array([1, 1, 0]))
    t.backward(out.sum())
    np.testing.assert_array_equal(table.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_forward_repeatable_bitwise():
    def run():
        t = tp.Tape()
        x = t.leaf(np.linspace(-1, 1, 12).reshape(3, 4))
        w = t.leaf(np.arange(8.0).reshape(4, 2) / 7.0)
        out = tp.softmax(tp.tanh(x @ w))
        loss = (out * out).sum()
        t.backward(loss)
        return loss.value.copy(), x.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_array_equal(g1, g2)


def test_unreached_leaf_gets_zero_grad_and_reached_flag():
    t = tp.Tape()
    x = t.leaf(np.ones(2))
    y = t.leaf(np.ones(2))
    t.backward((x * 2.0).sum())
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])
    assert t.reached(x) and not t.reached(y)


def test_mixed_tapes_rejected():
    t1, t2 = tp.Tape(), tp.Tape()
    with pytest.raises(ValueError, match="tape"):
        tp.add(t1.leaf(np.ones(2)), t2.leaf(np.ones(2)))


def test_primitive_catalog_covers_model_ops():
    required = {
        "matmul", "add", "sub", "mul", "div", "concat", "gather",
        "reduce_sum", "reduce_mean", "exp", "log", "sigmoid", "tanh",
        "softmax", "l2_normalize", "square", "reshape", "transpose",
        "broadcast_to", "gru_sequence",
    }
    assert required <= set(tp.PRIMITIVES)
