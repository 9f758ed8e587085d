"""
Dense float64 tensors with tape-based reverse-mode differentiation.

The tape is built while the forward pass runs (define-by-run): every
differentiable operation returns a tensor carrying a TapeNode that points
at its inputs. Calling backward() on a scalar walks those nodes once, in
reverse creation order, and accumulates gradients into the leaf tensors.

Operands are rank-1 ``[n]`` or batched rank-2 ``[B, n]``.
"""
import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float, int]

# Creation order doubles as a topological order: inputs always exist
# before the tensors computed from them.
_uids = itertools.count()
_grad_mode = threading.local()


class TensorError(ValueError):
    """Base exception for tensor operations."""
    pass


class ShapeError(TensorError):
    """Operand shapes do not conform."""
    pass


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""
    pass


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording tape nodes (this thread only)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


@dataclass
class TapeNode:
    """A recorded operation: its kind, its inputs and its backward rule."""
    uid: int
    op_kind: str
    parents: tuple["Tensor", ...]
    function: "Function"

    @property
    def parent_ids(self) -> tuple[int, ...]:
        return tuple(p.uid for p in self.parents)


class Tensor:
    """A dense float64 array that may take part in differentiation."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        array = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Tensor {name or '<unnamed>'} holds non-finite values")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node: Optional[TapeNode] = None
        self.uid = next(_uids)

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64, order="C")
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.node = None
        out.uid = next(_uids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class Parameter(Tensor):
    """A named learnable leaf tensor."""

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement forward() on raw arrays and backward() returning
    one gradient (or None) per tensor input.
    """

    op_kind = "function"

    def __init__(self):
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.op_kind} produced non-finite values")

        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor._from_op(out, requires_grad)
        if requires_grad:
            result.node = TapeNode(result.uid, cls.op_kind, tensors, fn)
        return result


def _check_rank(array: np.ndarray, op_kind: str) -> None:
    if array.ndim not in (1, 2):
        raise ShapeError(f"{op_kind} expects rank-1 or rank-2 operands, got shape {array.shape}")


def _sum_batch(grad: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reduce a batched gradient back to the shape of an unbatched operand."""
    return grad.sum(axis=0) if grad.ndim > like.ndim else grad


class Affine(Function):
    op_kind = "affine"

    def forward(self, x, weights, bias):
        _check_rank(x, self.op_kind)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],) or x.shape[-1] != weights.shape[1]:
            raise ShapeError(
                f"affine shapes do not conform: x {x.shape}, W {weights.shape}, b {bias.shape}"
            )
        self.saved["x"] = x
        self.saved["weights"] = weights
        return x @ weights.T + bias

    def backward(self, grad):
        x, weights = self.saved["x"], self.saved["weights"]
        grad_x = grad @ weights
        if x.ndim == 1:
            grad_w = np.outer(grad, x)
        else:
            grad_w = grad.T @ x
        grad_b = grad.sum(axis=0) if grad.ndim == 2 else grad
        return grad_x, grad_w, grad_b


class Concat(Function):
    op_kind = "concat"

    def forward(self, a, b):
        _check_rank(a, self.op_kind)
        if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
            raise ShapeError(f"concat rank mismatch: {a.shape} and {b.shape}")
        self.saved["split"] = a.shape[-1]
        return np.concatenate([a, b], axis=-1)

    def backward(self, grad):
        split = self.saved["split"]
        return grad[..., :split], grad[..., split:]


class ReLU(Function):
    op_kind = "relu"

    def forward(self, x):
        mask = x > 0
        self.saved["mask"] = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.saved["mask"],)


class PReLU(Function):
    op_kind = "prelu"

    def forward(self, x, slopes):
        if slopes.ndim != 1 or x.ndim == 0 or x.shape[-1] != slopes.shape[0]:
            raise ShapeError(f"prelu needs one slope per channel: x {x.shape}, slopes {slopes.shape}")
        positive = x > 0
        self.saved.update(x=x, slopes=slopes, positive=positive)
        return np.where(positive, x, slopes * x)

    def backward(self, grad):
        x, slopes, positive = self.saved["x"], self.saved["slopes"], self.saved["positive"]
        grad_x = np.where(positive, grad, grad * slopes)
        grad_slopes = np.where(positive, 0.0, grad * x)
        return grad_x, _sum_batch(grad_slopes, slopes)


class Clamp(Function):
    op_kind = "clamp"

    def forward(self, x, lo: float, hi: float):
        # zero subgradient at and beyond the bounds
        self.saved["inside"] = (x > lo) & (x < hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.saved["inside"],)


class _Elementwise(Function):

    def _check(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{self.op_kind} shapes differ: {a.shape} and {b.shape}")


class Add(_Elementwise):
    op_kind = "add"

    def forward(self, a, b):
        self._check(a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(_Elementwise):
    op_kind = "sub"

    def forward(self, a, b):
        self._check(a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(_Elementwise):
    op_kind = "mul"

    def forward(self, a, b):
        self._check(a, b)
        self.saved.update(a=a, b=b)
        return a * b

    def backward(self, grad):
        return grad * self.saved["b"], grad * self.saved["a"]


class Sigmoid(Function):
    op_kind = "sigmoid"

    def forward(self, x):
        out = expit(x)
        self.saved["out"] = out
        return out

    def backward(self, grad):
        out = self.saved["out"]
        return (grad * out * (1.0 - out),)


class Tanh(Function):
    op_kind = "tanh"

    def forward(self, x):
        out = np.tanh(x)
        self.saved["out"] = out
        return out

    def backward(self, grad):
        out = self.saved["out"]
        return (grad * (1.0 - out * out),)


class Total(Function):
    op_kind = "total"

    def forward(self, x):
        self.saved["shape"] = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.saved["shape"], grad.item()),)


class SoftmaxNLL(Function):
    """Negative log-likelihood of softmax probabilities; batch-mean for rank-2 logits."""

    op_kind = "softmax_nll"

    def forward(self, logits, labels):
        _check_rank(logits, self.op_kind)
        labels = np.asarray(labels, dtype=np.int64)
        n_classes = logits.shape[-1]
        expected = () if logits.ndim == 1 else (logits.shape[0],)
        if labels.shape != expected:
            raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if np.any(labels < 0) or np.any(labels >= n_classes):
            raise TensorError(f"label out of range [0, {n_classes})")

        # log-sum-exp with the max logit subtracted
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_norm
        one_hot = np.zeros_like(logits)
        if logits.ndim == 1:
            one_hot[labels] = 1.0
        else:
            one_hot[np.arange(labels.shape[0]), labels] = 1.0
        self.saved.update(probs=np.exp(log_probs), one_hot=one_hot)

        nll = -(log_probs * one_hot).sum(axis=-1)
        return np.asarray(nll.mean())

    def backward(self, grad):
        probs, one_hot = self.saved["probs"], self.saved["one_hot"]
        batch = probs.shape[0] if probs.ndim == 2 else 1
        return (grad.item() * (probs - one_hot) / batch,)


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Compute W·x + b (row-wise for a batch)."""
    return Affine.apply(x, weights, bias)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    return Concat.apply(a, b)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def prelu(x: Tensor, slopes: Tensor) -> Tensor:
    """Rectifier with one learned negative-side slope per channel."""
    return PReLU.apply(x, slopes)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise min(hi, max(lo, x))."""
    if lo > hi:
        raise TensorError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    return Clamp.apply(x, lo=lo, hi=hi)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def total(x: Tensor) -> Tensor:
    """Sum every entry into a scalar."""
    return Total.apply(x)


def softmax_nll(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Softmax negative log-likelihood.

    Args:
        logits: Class scores, [C] or [B, C]
        labels: A class index, or one index per batch row

    Returns:
        Scalar loss (batch mean for rank-2 logits)
    """
    return SoftmaxNLL.apply(logits, labels=labels)


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into the grad of every reachable leaf.

    Each tape node is visited exactly once, newest first. Gradients keep
    accumulating across calls until zero_grad().
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss is not connected to any tensor that requires grad")

    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        tensor = stack.pop()
        if tensor.node is None or tensor.uid in reachable:
            continue
        reachable[tensor.uid] = tensor
        stack.extend(p for p in tensor.node.parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {loss.uid: seed}
    for uid in sorted(reachable, reverse=True):
        node = reachable[uid].node
        grad = pending.pop(uid, None)
        if grad is None:
            continue
        parent_grads = node.function.backward(grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad
            elif parent.uid in pending:
                pending[parent.uid] = pending[parent.uid] + parent_grad
            else:
                pending[parent.uid] = parent_grad

    logger.debug(f"Backward visited {len(reachable)} tape nodes")


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""
    max_rel_error: float = 0.0
    checked: int = 0
    skipped_kinks: int = 0
    worst: Optional[str] = None
    errors: list[float] = field(default_factory=list, repr=False)


def grad_check_report(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
    samples_per_param: Optional[int] = None,
    seed: int = 0,
    kink_tolerance: float = 1e-4,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences.

    Coordinates whose forward and backward difference quotients disagree by
    more than kink_tolerance (absolute below unit slope, relative above)
    straddle a ReLU/PReLU/clamp kink; they are counted and left out of the
    error. A check that compares no coordinate reports an infinite error.

    Args:
        f: Deterministic closure computing a scalar loss from params
        params: Leaf tensors to check (perturbed in place, then restored)
        h: Finite-difference step
        floor: Lower bound of the relative-error denominator
        samples_per_param: Check a seeded subset of coordinates per tensor
        seed: Seed for the coordinate subset
        kink_tolerance: One-sided quotient disagreement marking a kink

    Returns:
        GradCheckReport with the maximum relative error
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with no_grad():
        base = f().item()
        for index, (param, grads) in enumerate(zip(params, analytic)):
            flat = param.data.reshape(-1)
            flat_grads = grads.reshape(-1)
            coords = np.arange(flat.size)
            if samples_per_param is not None and samples_per_param < flat.size:
                coords = np.sort(rng.choice(flat.size, size=samples_per_param, replace=False))

            for i in coords:
                original = flat[i]
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
                flat[i] = original

                forward_q = (plus - base) / h
                backward_q = (base - minus) / h
                if abs(forward_q - backward_q) > kink_tolerance * max(1.0, abs(forward_q) + abs(backward_q)):
                    report.skipped_kinks += 1
                    continue

                numeric = (plus - minus) / (2 * h)
                error = abs(flat_grads[i] - numeric) / max(floor, abs(flat_grads[i]) + abs(numeric))
                report.errors.append(error)
                report.checked += 1
                if error > report.max_rel_error:
                    report.max_rel_error = error
                    report.worst = f"{param.name or f'param{index}'}[{i}]"

    if report.checked == 0:
        report.max_rel_error = math.inf
        logger.warning(f"Gradient check compared no coordinate ({report.skipped_kinks} kinks skipped)")
    for p in params:
        p.zero_grad()
    logger.debug(
        f"Gradient check: {report.checked} coordinates, {report.skipped_kinks} kinks skipped, "
        f"max relative error {report.max_rel_error:.3e} at {report.worst}"
    )
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], **kwargs: Any) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_report(f, params, **kwargs).max_rel_error
