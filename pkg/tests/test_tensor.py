import numpy as np
import pytest

from amtnn import tensor as tn
from amtnn.tensor import Tensor


def fd_check(fn, *shapes, seed=0, positive=False, tol=1e-6):
    """Compare the backward pass of scalar ``sum(fn(*xs) * w)`` with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, size=s) if positive else rng.normal(size=s) for s in shapes]
    probe = rng.normal(size=np.shape(fn(*[Tensor(a) for a in arrays]).data))
    params = {f"x{k}": tn.parameter(a) for k, a in enumerate(arrays)}

    def build(ts):
        return tn.sum_(tn.mul(fn(*ts), probe))

    analytic = tn.backward(build(list(params.values())), params)

    def value(arrs):
        return build([Tensor(arrs[k]) for k in params]).item()

    numeric = tn.finite_difference_gradient(value, {k: v.data for k, v in params.items()})
    assert tn.max_relative_error(analytic, numeric, floor=1e-6) < tol


@pytest.mark.parametrize("fn,shapes,positive", [
    (tn.add, [(3, 4), (4,)], False),
    (tn.sub, [(3, 4), (3, 1)], False),
    (tn.mul, [(2, 3), (2, 3)], False),
    (tn.div, [(2, 3), (2, 3)], True),
    (tn.exp, [(5,)], False),
    (tn.log, [(5,)], True),
    (tn.sqrt, [(5,)], True),
    (tn.square, [(4, 2)], False),
    (tn.elu, [(6, 3)], False),
    (tn.sigmoid, [(6,)], False),
    (tn.softplus, [(6,)], False),
    (tn.log_sigmoid, [(6,)], False),
    (lambda a: tn.logsumexp(a, axis=1), [(3, 5)], False),
    (lambda a: tn.log_softmax(a, axis=1), [(3, 5)], False),
    (lambda a: tn.softmax(a, axis=1), [(3, 5)], False),
    (tn.matmul, [(3, 4), (4, 2)], False),
    (tn.affine, [(3, 4), (4, 2), (2,)], False),
    (lambda a: tn.sum_(a, axis=0), [(3, 4)], False),
    (lambda a: tn.mean(a, axis=1, keepdims=True), [(3, 4)], False),
    (lambda a: tn.l2norm(a, axis=1), [(3, 4)], False),
    (lambda a: tn.reshape(a, (6,)), [(2, 3)], False),
    (tn.transpose, [(2, 3)], False),
    (lambda a: tn.take_rows(a, np.array([2, 0, 2])), [(3, 2)], False),
    (lambda a, b: tn.concat([a, b], axis=0), [(2, 3), (1, 3)], False),
])
def test_op_gradients_match_finite_differences(fn, shapes, positive):
    fd_check(fn, *shapes, positive=positive)


def test_relu_gradient_away_from_kink():
    x = tn.parameter(np.array([-2.0, -0.5, 0.5, 3.0]))
    (g,) = tn.grad(tn.sum_(tn.relu(x)), [x])
    np.testing.assert_array_equal(g.data, [0, 0, 1, 1])


def test_square_at_three():
    x = tn.parameter(np.array(3.0))
    (g,) = tn.grad(tn.mul(x, x), [x])
    assert g.item() == 6.0


def test_shared_subexpression_accumulates():
    x = tn.parameter(np.array([1.0, 2.0]))
    y = tn.mul(x, x)
    z = tn.sum_(tn.add(y, y))
    (g,) = tn.grad(z, [x])
    np.testing.assert_allclose(g.data, 4 * x.data)


def test_gradient_reversal_forward_identity_and_backward_negation():
    x = tn.parameter(np.array([1.0, 2.0, 3.0]))
    out = tn.gradient_reversal(x)
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])
    (g,) = tn.grad(tn.sum_(tn.mul(out, 2.5)), [x])
    np.testing.assert_array_equal(g.data, [-2.5, -2.5, -2.5])
    twice = tn.gradient_reversal(tn.gradient_reversal(x))
    (g2,) = tn.grad(tn.sum_(tn.mul(twice, 2.5)), [x])
    np.testing.assert_array_equal(g2.data, [2.5, 2.5, 2.5])


def test_reversal_negates_parameter_gradients():
    rng = np.random.default_rng(1)
    w = tn.parameter(rng.normal(size=(3, 2)))
    x = rng.normal(size=(4, 3))
    (plain,) = tn.grad(tn.mean(tn.elu(tn.matmul(x, w))), [w])
    (rev,) = tn.grad(tn.mean(tn.gradient_reversal(tn.elu(tn.matmul(x, w)))), [w])
    np.testing.assert_array_equal(rev.data, -plain.data)


def test_double_backward_of_gradient_norm_penalty():
    # (||df/dx|| - 1)^2 for an elu unit, differentiated wrt its weight
    rng = np.random.default_rng(2)
    w = tn.parameter(rng.normal(size=(3, 1)))
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def penalty(weight, xin):
        score = tn.sum_(tn.elu(tn.matmul(xin, weight)))
        (dx,) = tn.grad(score, [xin], create_graph=True)
        return tn.mean(tn.square(tn.sub(tn.l2norm(dx, axis=1), 1.0)))

    analytic = tn.backward(penalty(w, x), {"w": w})

    def value(arrs):
        return penalty(Tensor(arrs["w"], requires_grad=True), Tensor(x.data, requires_grad=True)).item()

    numeric = tn.finite_difference_gradient(value, {"w": w.data})
    assert tn.max_relative_error(analytic, numeric) < 1e-6


def test_grad_without_create_graph_is_constant():
    x = tn.parameter(np.array([1.0, -1.0]))
    (g,) = tn.grad(tn.sum_(tn.square(x)), [x])
    assert not g.requires_grad


def test_grad_of_unrelated_input_is_zero():
    x = tn.parameter(np.ones(3))
    y = tn.parameter(np.ones(2))
    (gy,) = tn.grad(tn.sum_(tn.square(x)), [y])
    np.testing.assert_array_equal(gy.data, np.zeros(2))


def test_backward_rejects_non_scalar_root():
    x = tn.parameter(np.ones(3))
    with pytest.raises(ValueError):
        tn.backward(tn.square(x), {"x": x})


def test_backward_rejects_empty_tape():
    with pytest.raises(ValueError):
        tn.backward(Tensor(np.array(1.0)), {"x": tn.parameter(np.ones(1))})


def test_non_finite_results_raise():
    with pytest.raises(tn.NonFiniteError):
        tn.log(Tensor(np.array([0.0])))
    with pytest.raises(tn.NonFiniteError):
        tn.exp(Tensor(np.array([1e4])))


def test_stable_activations_at_extremes():
    z = Tensor(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(tn.log_sigmoid(z).data, [-800.0, -np.log(2.0), 0.0])
    np.testing.assert_allclose(tn.softplus(z).data, [0.0, np.log(2.0), 800.0])
    np.testing.assert_allclose(tn.sigmoid(z).data, [0.0, 0.5, 1.0])


def test_softmax_rows_on_simplex():
    rng = np.random.default_rng(3)
    p = tn.softmax(Tensor(rng.normal(size=(4, 6)) * 30), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_l2norm_gradient_at_zero_is_zero():
    x = tn.parameter(np.zeros((2, 3)))
    (g,) = tn.grad(tn.sum_(tn.l2norm(x, axis=1)), [x])
    np.testing.assert_array_equal(g.data, np.zeros((2, 3)))


def test_forward_dispatch_table():
    out = tn.forward("add", Tensor(np.array([1.0])), Tensor(np.array([2.0])))
    assert out.item() == 3.0
    with pytest.raises(ValueError):
        tn.forward("conv", Tensor(np.array([1.0])))


def test_topological_order_parents_first():
    x = tn.parameter(np.array(1.0))
    y = tn.exp(x)
    z = tn.mul(y, x)
    order = tn.topological_order(z)
    assert order.index(x) < order.index(y) < order.index(z)


def test_broadcast_mismatch_is_an_error():
    with pytest.raises(ValueError):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
