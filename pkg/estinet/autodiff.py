"""
Reverse-mode differentiation primitives shared by every experiment.

Tensors and the recorded graph are PyTorch's; this module adds the named op catalog
used by layers and gradient checks, the single-use ``backward`` rule, the Adam step,
the training losses and the finite-difference oracle.
"""
import logging
import math
import weakref
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

# Added inside log() of the NALU multiplicative path and of entropies.
LOG_EPSILON = 1e-12
ELU_ALPHA = 1.0
DISTRIBUTION_TOLERANCE = 1e-6
# smallest gradient magnitude finite-difference errors are taken relative to
GRADCHECK_FLOOR = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class GraphConsumedError(RuntimeError):
    pass


def _is_scalar(t):
    return t.dim() == 0 or t.numel() == 1


def _check_bias_broadcast(name, a, b):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    if b.dim() == 1 and a.dim() >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.dim() == 1 and b.dim() >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(
        f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform. "
        "Only equal shapes or a vector over the last axis are supported"
    )


def _elementwise(name, fn):
    def op(a, b):
        _check_bias_broadcast(name, a, b)
        return fn(a, b)

    return op


def _div(a, b):
    _check_bias_broadcast("div", a, b)
    if bool((b == 0).any()):
        raise ValueError("div: division by zero")
    return a / b


def _log(a):
    if bool((a <= 0).any()):
        raise ValueError("log: input must be strictly positive")
    return torch.log(a)


def _matmul(a, b):
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if a.dim() == 0 or a.shape[-1] != inner_b:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not chain")
    return torch.matmul(a, b)


def _conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv2d: expected (N, C, H, W) input and (F, C, kH, kW) weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def _max_pool2d(x, kernel_size=2):
    if x.dim() < 3 or x.shape[-1] < kernel_size or x.shape[-2] < kernel_size:
        raise ShapeError(f"max_pool2d: input {tuple(x.shape)} smaller than kernel {kernel_size}")
    return F.max_pool2d(x, kernel_size)


def _concat(*tensors, dim=-1):
    return torch.cat(tensors, dim=dim)


def _reshape(x, shape):
    if math.prod(shape) != x.numel() and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {tuple(shape)}")
    return x.reshape(shape)


def _slice(x, start, stop, dim=-1):
    return x.narrow(dim, start, stop - start)


def _sum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim)


def _mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim)


OPS: Dict[str, Callable] = {
    "matmul": _matmul,
    "add": _elementwise("add", torch.add),
    "sub": _elementwise("sub", torch.sub),
    "mul": _elementwise("mul", torch.mul),
    "div": _div,
    "neg": torch.neg,
    "exp": torch.exp,
    "log": _log,
    "abs": torch.abs,
    "relu": F.relu,
    "elu": lambda x: F.elu(x, alpha=ELU_ALPHA),
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softmax": lambda x: F.softmax(x, dim=-1),
    "log_softmax": lambda x: F.log_softmax(x, dim=-1),
    "max_pool2d": _max_pool2d,
    "conv2d": _conv2d,
    "concat": _concat,
    "reshape": _reshape,
    "slice": _slice,
    "sum": _sum,
    "mean": _mean,
    "square": torch.square,
}


def forward_op(name, *inputs, **params):
    try:
        fn = OPS[name]
    except KeyError:
        raise ValueError(f"Unknown op name={name}. Available ops are: {sorted(OPS)}")
    output = fn(*inputs, **params)
    inputs_finite = all(bool(torch.isfinite(t).all()) for t in inputs if torch.is_tensor(t))
    if inputs_finite and not bool(torch.isfinite(output).all()):
        raise NonFiniteError(f"{name} produced non-finite values from finite inputs")
    return output


# ids of losses whose graph was already walked by backward()
_consumed_loss_ids = set()


def backward(loss, tensors):
    """
    Walk the graph recorded for ``loss`` once and return a gradient per tensor.

    ``tensors`` is a mapping of names to tensors, or a sequence (keys become positions).
    Tensors the loss does not reach get zero gradients. Each tensor's ``.grad`` is set
    to the returned gradient. A second call with the same loss raises
    ``GraphConsumedError``.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to a graph with trainable inputs")
    if id(loss) in _consumed_loss_ids:
        raise GraphConsumedError("backward was already called for this loss")

    named = dict(tensors) if isinstance(tensors, Mapping) else dict(enumerate(tensors))
    grads = torch.autograd.grad(loss.reshape(()), list(named.values()), allow_unused=True)
    _consumed_loss_ids.add(id(loss))
    weakref.finalize(loss, _consumed_loss_ids.discard, id(loss))

    grad_map = {}
    for (key, t), grad in zip(named.items(), grads):
        grad = torch.zeros_like(t) if grad is None else grad
        t.grad = grad.detach()
        grad_map[key] = grad.detach()
    return grad_map


@dataclass
class AdamState:
    optimizer: torch.optim.Adam
    params: List[torch.Tensor]
    step_count: int = 0

    @classmethod
    def create(cls, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        params = list(params)
        return cls(optimizer=torch.optim.Adam(params, lr=lr, betas=betas, eps=eps), params=params)

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def moments(self, param):
        state = self.optimizer.state.get(param, {})
        return state.get("exp_avg"), state.get("exp_avg_sq")


def adam_step(params, grads, state: AdamState):
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"Got {len(params)} params but {len(grads)} grads")
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("params do not match the parameters AdamState was created for")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        p.grad = torch.zeros_like(p) if g is None else g.detach().clone()
    state.optimizer.step()
    state.step_count += 1
    return params


def _check_distribution(name, p):
    if bool((p < 0).any()):
        raise ValueError(f"{name}: probabilities must be non-negative")
    row_sums = p.sum(-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=DISTRIBUTION_TOLERANCE):
        raise ValueError(f"{name}: rows must sum to 1, found sums {row_sums.flatten()[:5]}")


def cross_entropy(logits, target):
    if target.shape != logits.shape:
        raise ShapeError(
            f"cross_entropy: target shape {tuple(target.shape)} != logits {tuple(logits.shape)}"
        )
    _check_distribution("cross_entropy", target)
    return -(target * F.log_softmax(logits, dim=-1)).sum(-1).mean()


def entropy(probabilities):
    """Entropy over the last axis, with 0 * log 0 taken as 0."""
    _check_distribution("entropy", probabilities)
    return -(probabilities * torch.log(probabilities + LOG_EPSILON)).sum(-1)


def _as_distribution(gold, n_classes, like):
    if gold.dtype in (torch.int64, torch.int32, torch.bool):
        return F.one_hot(gold.long(), n_classes).to(like.dtype)
    return gold.to(like.dtype)


def label_smoothing_loss(logits, gold, epsilon, prior=None):
    """Cross entropy against (1 - epsilon) * gold + epsilon * prior; prior defaults to uniform."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"Invalid epsilon={epsilon}. Must be in [0, 1]")
    n_classes = logits.shape[-1]
    gold = _as_distribution(gold, n_classes, logits)
    if prior is None:
        prior = torch.full((n_classes,), 1.0 / n_classes, dtype=logits.dtype, device=logits.device)
    else:
        prior = prior.to(logits.dtype)
        _check_distribution("label_smoothing_loss prior", prior)
    target = (1.0 - epsilon) * gold + epsilon * prior.expand_as(gold)
    return cross_entropy(logits, target)


def summed_entropy(arg_distributions):
    """
    Per-sample sum of argument entropies.

    Accepts a tensor shaped (..., n_args, n_classes), or a list of tensors shaped
    (batch, ..., n_classes) whose class counts may differ.
    """
    if torch.is_tensor(arg_distributions):
        return entropy(arg_distributions).sum(-1)
    per_arg = [entropy(p) for p in arg_distributions]
    return sum(h.reshape(h.shape[0], -1).sum(-1) if h.dim() > 0 else h for h in per_arg)


def entropy_term(arg_distributions, gamma, mode="threshold"):
    """Unweighted confidence regularizer: max(sum H - gamma, 0), or -sum H to maximize entropy."""
    if gamma < 0:
        raise ValueError(f"Invalid gamma={gamma}. Must be >= 0")
    total = summed_entropy(arg_distributions)
    if mode == "threshold":
        return torch.clamp(total - gamma, min=0.0).mean()
    elif mode == "maximize":
        return -total.mean()
    raise ValueError(f"Unknown entropy mode={mode}. Expected threshold or maximize")


def threshold_entropy_penalty(arg_distributions, lam, gamma):
    if lam < 0:
        raise ValueError(f"Invalid lambda={lam}. Must be >= 0")
    return lam * entropy_term(arg_distributions, gamma, mode="threshold")


def total_loss(target_term, bb_term, entropy_term, beta=1.0, lam=1.0):
    return target_term + beta * bb_term + lam * entropy_term


@dataclass
class GradcheckCase:
    """
    ``build(generator)`` returns ``(closure, leaves)``: a no-argument function computing
    an output tensor from ``leaves``, in double precision.
    """

    name: str
    build: Callable[[torch.Generator], Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]]
    trials: int = 50


@dataclass
class GradcheckResult:
    name: str
    max_relative_error: float
    passed: bool
    trials: int = field(default=0)


def max_relative_error(closure, leaves, h=1e-5, floor=GRADCHECK_FLOOR):
    """
    Compare autograd gradients of a fixed projection of ``closure()`` to central differences.

    Errors are relative to the larger of the two gradients; ``floor`` only keeps gradients
    that are exactly zero on both sides from dividing by zero.
    """
    output = closure()
    weights = torch.linspace(0.5, 1.5, output.numel(), dtype=output.dtype).reshape(output.shape)
    analytic = torch.autograd.grad((output * weights).sum(), leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.view(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = (closure() * weights).sum().item()
                flat[i] = original - h
                minus = (closure() * weights).sum().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                a = flat_grad[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


def run_gradcheck(cases, tolerance=1e-4, seed=0, trials=None):
    results = []
    for case in cases:
        generator = torch.Generator().manual_seed(seed)
        n_trials = trials or case.trials
        worst = 0.0
        for __ in range(n_trials):
            closure, leaves = case.build(generator)
            worst = max(worst, max_relative_error(closure, leaves))
        passed = worst < tolerance
        if not passed:
            logger.error(f"Gradient check failed for {case.name}: max_relative_error={worst:.3e}")
        results.append(
            GradcheckResult(
                name=case.name, max_relative_error=worst, passed=passed, trials=n_trials
            )
        )
    return results


def _rand(generator, *shape, low=-1.0, high=1.0):
    t = torch.rand(*shape, generator=generator, dtype=torch.float64) * (high - low) + low
    return t.requires_grad_()


def _away_from_zero(generator, *shape, margin=0.1):
    magnitude = torch.rand(*shape, generator=generator, dtype=torch.float64) * 0.9 + margin
    sign = torch.where(
        torch.rand(*shape, generator=generator, dtype=torch.float64) < 0.5, -1.0, 1.0
    ).double()
    return (magnitude * sign).requires_grad_()


def _distinct(generator, *shape):
    # a shuffled grid keeps max-pool winners separated by more than the step size
    n = math.prod(shape)
    order = torch.randperm(n, generator=generator).double()
    return (order / n).reshape(shape).requires_grad_()


def _unary_case(name, make_input=_rand):
    def build(generator):
        x = make_input(generator, 3, 4)
        return (lambda: forward_op(name, x)), [x]

    return GradcheckCase(name, build)


def _binary_case(name, make_second=_rand):
    def build(generator):
        a = _rand(generator, 3, 4)
        b = make_second(generator, 3, 4)
        return (lambda: forward_op(name, a, b)), [a, b]

    return GradcheckCase(name, build)


def _positive(generator, *shape):
    return _rand(generator, *shape, low=0.5, high=2.0)


def _matmul_build(generator):
    a, b = _rand(generator, 3, 4), _rand(generator, 4, 2)
    return (lambda: forward_op("matmul", a, b)), [a, b]


def _conv2d_build(generator):
    x, w, b = _rand(generator, 1, 2, 6, 6), _rand(generator, 3, 2, 3, 3), _rand(generator, 3)
    return (lambda: forward_op("conv2d", x, w, b)), [x, w, b]


def _max_pool2d_build(generator):
    x = _distinct(generator, 1, 2, 4, 4)
    return (lambda: forward_op("max_pool2d", x, kernel_size=2)), [x]


def _concat_build(generator):
    a, b = _rand(generator, 3, 2), _rand(generator, 3, 4)
    return (lambda: forward_op("concat", a, b, dim=-1)), [a, b]


def _reshape_build(generator):
    x = _rand(generator, 3, 4)
    return (lambda: forward_op("reshape", x, (2, 6))), [x]


def _slice_build(generator):
    x = _rand(generator, 3, 5)
    return (lambda: forward_op("slice", x, 1, 4)), [x]


def _reduction_case(name):
    def build(generator):
        x = _rand(generator, 3, 4)
        return (lambda: forward_op(name, x, dim=-1)), [x]

    return GradcheckCase(name, build)


def op_gradcheck_cases() -> List[GradcheckCase]:
    return [
        GradcheckCase("matmul", _matmul_build),
        _binary_case("add"),
        _binary_case("sub"),
        _binary_case("mul"),
        _binary_case("div", make_second=_positive),
        _unary_case("neg"),
        _unary_case("exp"),
        _unary_case("log", make_input=_positive),
        _unary_case("abs", make_input=_away_from_zero),
        _unary_case("relu", make_input=_away_from_zero),
        _unary_case("elu", make_input=_away_from_zero),
        _unary_case("tanh"),
        _unary_case("sigmoid"),
        _unary_case("softmax"),
        _unary_case("log_softmax"),
        GradcheckCase("max_pool2d", _max_pool2d_build),
        GradcheckCase("conv2d", _conv2d_build, trials=10),
        GradcheckCase("concat", _concat_build),
        GradcheckCase("reshape", _reshape_build),
        GradcheckCase("slice", _slice_build),
        _reduction_case("sum"),
        _reduction_case("mean"),
        _unary_case("square"),
    ]


def loss_gradcheck_cases() -> List[GradcheckCase]:
    def cross_entropy_build(generator):
        logits = _rand(generator, 3, 5)
        target = torch.softmax(torch.rand(3, 5, generator=generator, dtype=torch.float64), -1)
        return (lambda: cross_entropy(logits, target)), [logits]

    def entropy_build(generator):
        logits = _rand(generator, 3, 5)
        return (lambda: entropy(torch.softmax(logits, -1))), [logits]

    def smoothing_build(generator):
        logits = _rand(generator, 3, 5)
        gold = torch.randint(0, 5, (3,), generator=generator)
        return (lambda: label_smoothing_loss(logits, gold, 0.6)), [logits]

    def penalty_build(generator):
        logits = _rand(generator, 2, 3, 5)
        return (lambda: threshold_entropy_penalty(torch.softmax(logits, -1), 0.1, 0.15)), [logits]

    return [
        GradcheckCase("cross_entropy", cross_entropy_build),
        GradcheckCase("entropy", entropy_build),
        GradcheckCase("label_smoothing_loss", smoothing_build),
        GradcheckCase("threshold_entropy_penalty", penalty_build),
    ]


def check_gradients(
    cases: Optional[Sequence[GradcheckCase]] = None, tolerance=1e-4, seed=0, trials=None
):
    if cases is None:
        cases = op_gradcheck_cases() + loss_gradcheck_cases()
    return run_gradcheck(cases, tolerance=tolerance, seed=seed, trials=trials)
