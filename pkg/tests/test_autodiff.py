import math

import pytest
import torch

from estinet.autodiff import (
    AdamState,
    GradcheckCase,
    GraphConsumedError,
    NonFiniteError,
    OPS,
    ShapeError,
    adam_step,
    backward,
    check_gradients,
    cross_entropy,
    entropy,
    entropy_term,
    forward_op,
    label_smoothing_loss,
    loss_gradcheck_cases,
    max_relative_error,
    op_gradcheck_cases,
    run_gradcheck,
    summed_entropy,
    threshold_entropy_penalty,
    total_loss,
)


def test_forward_op_unknown_name_raises():
    with pytest.raises(ValueError, match="Unknown op"):
        forward_op("cube", torch.ones(2))


def test_forward_op_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        forward_op("matmul", torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ShapeError):
        forward_op("add", torch.ones(2, 3), torch.ones(3, 2))


def test_forward_op_bias_broadcast_over_last_axis():
    out = forward_op("add", torch.zeros(2, 3), torch.tensor([1.0, 2.0, 3.0]))
    assert out.tolist() == [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]


def test_forward_op_log_of_non_positive_raises():
    with pytest.raises(ValueError, match="strictly positive"):
        forward_op("log", torch.tensor([1.0, 0.0]))


def test_forward_op_division_by_zero_raises():
    with pytest.raises(ValueError, match="division by zero"):
        forward_op("div", torch.ones(2), torch.tensor([1.0, 0.0]))


def test_forward_op_non_finite_from_finite_inputs_raises():
    with pytest.raises(NonFiniteError):
        forward_op("exp", torch.tensor([1000.0]))


def test_forward_op_reshape_and_slice():
    x = torch.arange(12.0).reshape(3, 4)
    assert forward_op("reshape", x, (2, 6)).shape == (2, 6)
    assert forward_op("slice", x, 1, 3).tolist() == [[1.0, 2.0], [5.0, 6.0], [9.0, 10.0]]
    with pytest.raises(ShapeError):
        forward_op("reshape", x, (5, 5))


def test_op_catalog_is_covered_by_gradient_checks():
    assert {case.name for case in op_gradcheck_cases()} == set(OPS)


def test_backward_returns_named_gradients():
    a = torch.tensor([1.0, 2.0], requires_grad=True)
    b = torch.tensor([3.0, 4.0], requires_grad=True)
    unused = torch.tensor([5.0], requires_grad=True)
    loss = (a * b).sum()

    grads = backward(loss, {"a": a, "b": b, "unused": unused})

    assert grads["a"].tolist() == [3.0, 4.0]
    assert grads["b"].tolist() == [1.0, 2.0]
    assert grads["unused"].tolist() == [0.0]
    assert a.grad.tolist() == [3.0, 4.0]


def test_backward_twice_raises():
    a = torch.tensor([1.0, 2.0], requires_grad=True)
    loss = (a * a).sum()
    backward(loss, [a])

    with pytest.raises(GraphConsumedError):
        backward(loss, [a])


def test_backward_non_scalar_loss_raises():
    a = torch.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(a * 2, [a])


def test_adam_first_step_moves_by_learning_rate():
    p = torch.tensor([1.0, -1.0], requires_grad=True)
    state = AdamState.create([p], lr=0.1)

    adam_step([p], [torch.tensor([0.5, -2.0])], state)

    # bias-corrected first step is lr * sign(g)
    assert p.detach().tolist() == pytest.approx([0.9, -0.9], abs=1e-6)
    assert state.step_count == 1
    exp_avg, exp_avg_sq = state.moments(p)
    assert exp_avg.tolist() == pytest.approx([0.05, -0.2])
    assert exp_avg_sq.tolist() == pytest.approx([0.00025, 0.004])


def test_adam_step_rejects_foreign_params():
    p = torch.zeros(2, requires_grad=True)
    q = torch.zeros(2, requires_grad=True)
    state = AdamState.create([p])

    with pytest.raises(ValueError):
        adam_step([q], [torch.ones(2)], state)
    with pytest.raises(ShapeError):
        adam_step([p], [torch.ones(3)], state)


def test_cross_entropy_of_uniform_logits():
    logits = torch.zeros(2, 4)
    target = torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]])
    assert float(cross_entropy(logits, target)) == pytest.approx(math.log(4))


def test_cross_entropy_rejects_invalid_target():
    with pytest.raises(ValueError, match="sum to 1"):
        cross_entropy(torch.zeros(1, 2), torch.tensor([[0.5, 0.6]]))
    with pytest.raises(ShapeError):
        cross_entropy(torch.zeros(1, 2), torch.tensor([[1.0, 0.0, 0.0]]))


def test_entropy_of_one_hot_is_zero_and_uniform_is_log_n():
    h = entropy(torch.tensor([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]]))
    assert float(h[0]) == pytest.approx(0.0, abs=1e-9)
    assert float(h[1]) == pytest.approx(math.log(3), rel=1e-5)


def test_label_smoothing_with_epsilon_zero_is_cross_entropy():
    logits = torch.tensor([[2.0, 0.5, -1.0]])
    gold = torch.tensor([0])
    expected = -torch.log_softmax(logits, -1)[0, 0]
    assert float(label_smoothing_loss(logits, gold, 0.0)) == pytest.approx(float(expected))


def test_label_smoothing_with_epsilon_one_ignores_gold():
    logits = torch.tensor([[2.0, 0.5, -1.0]])
    first = label_smoothing_loss(logits, torch.tensor([0]), 1.0)
    second = label_smoothing_loss(logits, torch.tensor([2]), 1.0)
    assert float(first) == pytest.approx(float(second))


def test_label_smoothing_rejects_bad_epsilon():
    with pytest.raises(ValueError, match="epsilon"):
        label_smoothing_loss(torch.zeros(1, 3), torch.tensor([0]), 1.5)


def test_summed_entropy_accepts_ragged_argument_lists():
    digits = torch.full((2, 10), 0.1)
    choice = torch.tensor([[1.0, 0.0], [0.5, 0.5]])
    total = summed_entropy([digits, choice])
    assert total.tolist() == pytest.approx([math.log(10), math.log(10) + math.log(2)], rel=1e-5)


def test_entropy_term_threshold_and_maximize():
    uniform = torch.full((1, 2, 10), 0.1)
    summed = 2 * math.log(10)

    assert float(entropy_term(uniform, gamma=1.0)) == pytest.approx(summed - 1.0, rel=1e-5)
    assert float(entropy_term(uniform, gamma=10.0)) == 0.0
    assert float(entropy_term(uniform, gamma=0.0, mode="maximize")) == pytest.approx(
        -summed, rel=1e-5
    )
    with pytest.raises(ValueError):
        entropy_term(uniform, gamma=-1.0)
    with pytest.raises(ValueError):
        entropy_term(uniform, gamma=0.0, mode="minimize")


def test_threshold_entropy_penalty_scales_by_lambda():
    uniform = torch.full((1, 1, 10), 0.1)
    assert float(threshold_entropy_penalty(uniform, 0.5, 0.0)) == pytest.approx(
        0.5 * math.log(10), rel=1e-5
    )
    with pytest.raises(ValueError):
        threshold_entropy_penalty(uniform, -0.1, 0.0)


def test_total_loss_combines_terms():
    assert total_loss(1.0, 2.0, 3.0, beta=0.5, lam=0.1) == pytest.approx(2.3)


def test_check_gradients_passes_on_every_op_and_loss():
    results = check_gradients(trials=2)

    assert {r.name for r in results} == {
        c.name for c in op_gradcheck_cases() + loss_gradcheck_cases()
    }
    assert all(r.passed for r in results), [r for r in results if not r.passed]


class _WrongSignSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return -2 * x * grad_output


def test_gradcheck_detects_sign_error():
    def build(generator):
        x = (torch.rand(3, generator=generator, dtype=torch.float64) + 0.5).requires_grad_()
        return (lambda: _WrongSignSquare.apply(x)), [x]

    (result,) = run_gradcheck([GradcheckCase("wrong_sign_square", build)], trials=3)

    assert not result.passed
    assert result.max_relative_error > 1.0


class _SlightlyWrongSmallGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return 1e-3 * x

    @staticmethod
    def backward(ctx, grad_output):
        return 1.1e-3 * grad_output


def test_gradcheck_error_is_relative_for_small_gradients():
    x = torch.rand(3, dtype=torch.float64).requires_grad_()

    error = max_relative_error(lambda: _SlightlyWrongSmallGradient.apply(x), [x])

    # a 10% error on a 1e-3 gradient, not a 1e-4 absolute difference
    assert error == pytest.approx(0.1 / 1.1, rel=1e-3)
