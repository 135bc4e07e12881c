import numpy as np
import pytest

from vlreward.exceptions import ContractError, DegenerateInputError, DomainError, NumericalError, ShapeError
from vlreward.numcore import (
    ComputationTape,
    Tensor,
    concat,
    grad_check,
    l2_normalize,
    logsumexp,
    matmul,
    no_grad,
    norm,
    stack,
)


@pytest.fixture
def rs():
    return np.random.RandomState(7)


def test_add_broadcast_gradient():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_equal(a.grad, np.ones((3, 4)))
    np.testing.assert_equal(b.grad, np.full(4, 3.0))


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_tape_is_topologically_ordered():
    x = Tensor(np.arange(1.0, 4.0), requires_grad=True)
    out = ((x * 2.0).exp() + x).sum()
    tape = ComputationTape.from_output(out)
    position = {t.id: n for n, t in enumerate(tape.tensors)}
    for node in tape.nodes:
        for parent_id in node.input_ids:
            if parent_id in position:
                assert position[parent_id] < position[node.output_id]
    assert tape.tensors[-1] is out


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    np.testing.assert_equal(x.grad, [1.0])


def test_matmul_shapes_and_error():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 5)))
    assert matmul(a, b).shape == (2, 5)
    assert (a @ Tensor(np.ones(3))).shape == (2,)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 5\)"):
        matmul(a, Tensor(np.ones((2, 5))))


def test_logsumexp_stable_for_large_inputs():
    out = logsumexp(Tensor([1000.0, 1000.0]))
    assert out.item() == pytest.approx(1000.0 + np.log(2.0))


def test_logsumexp_empty_axis():
    with pytest.raises(DomainError):
        logsumexp(Tensor(np.zeros((2, 0))), axis=1)


def test_log_of_non_positive():
    with pytest.raises(DomainError):
        Tensor([1.0, 0.0]).log()


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor(np.zeros(3)))


def test_norm_gradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    norm(x).backward()
    np.testing.assert_equal(x.grad, np.zeros(3))


def test_relu_subgradient_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    x.relu().sum().backward()
    np.testing.assert_equal(x.grad, [0.0, 0.0, 1.0])


def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        Tensor([np.nan])
    with pytest.raises(NumericalError):
        Tensor([1000.0]).exp()


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).exp().backward()


def squared(t):
    return (t * t).sum()


@pytest.mark.parametrize("a_shape, b_shape", [((2, 3), (3, 5)), ((2, 3), (3,)), ((3,), (3, 5)), ((3,), (3,))])
def test_matmul_gradients_for_every_rank(rs, a_shape, b_shape):
    a, b = rs.normal(size=a_shape), rs.normal(size=b_shape)
    assert matmul(Tensor(a), Tensor(b)).shape == np.matmul(a, b).shape
    assert grad_check(lambda x: squared(matmul(x, Tensor(b))), a) < 1e-6
    assert grad_check(lambda x: squared(matmul(Tensor(a), x)), b) < 1e-6


def test_matmul_skips_constant_operand():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3, 4)))
    (a @ b).sum().backward()
    np.testing.assert_equal(a.grad, np.full((2, 3), 4.0))
    assert b.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    y.backward()
    assert x.grad is None
    assert (x * 2.0).requires_grad


def test_getitem_basic_index_gradient():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    x[1:, ::2].sum().backward()
    np.testing.assert_equal(x.grad, [[0, 0, 0, 0], [1, 0, 1, 0], [1, 0, 1, 0]])


def test_getitem_scatter_adds_repeated_indices():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 3])].sum().backward()
    np.testing.assert_equal(x.grad, [2.0, 0.0, 0.0, 1.0])


@pytest.mark.parametrize(
    "f",
    [
        lambda x: (x * x).sum(),
        lambda x: logsumexp(x, axis=1).sum(),
        lambda x: norm(x, axis=1).sum(),
        lambda x: (l2_normalize(x) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
        lambda x: (x @ x.T).mean(),
        lambda x: (x.exp() / (x * x + 1.0)).sum(),
        lambda x: stack([x[0], x[2]], axis=0).sum(axis=1).exp().sum(),
        lambda x: concat([x, x * 2.0], axis=1).reshape(-1).sum(),
    ],
)
def test_grad_check(rs, f):
    assert grad_check(f, rs.normal(size=(3, 4))) < 1e-6


def test_grad_check_needs_scalar(rs):
    with pytest.raises(ContractError):
        grad_check(lambda x: x * 2.0, rs.normal(size=3))


def test_detach_cuts_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x.detach() * x
    y.sum().backward()
    np.testing.assert_equal(x.grad, [1.0, 2.0])
