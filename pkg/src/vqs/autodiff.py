"""Reverse-mode autodiff over float64 numpy arrays.

Every operation returns a `Tensor` node that remembers its parents, how to
recompute its value from them, and how to push a gradient back to them. The
topologically ordered node list (`trace`) doubles as a computation record:
`backward` walks it once in reverse, and `replay` re-executes the recorded
forward with the current leaf values, which is what makes finite-difference
gradient checks measure exactly the function the tape differentiates (all
data-dependent choices stay frozen).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Array = np.ndarray


class NonFiniteValueError(FloatingPointError):
    """Raised when an operation produces inf or nan."""


class Tensor:
    """A float64 array plus its position in the computation record."""

    __slots__ = ("value", "grad", "parents", "_fwd", "_vjp", "name")

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        fwd: Optional[Callable[[], Array]] = None,
        vjp: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"non-finite tensor value{f' for {name}' if name else ''}")
        self.value = arr
        self.grad: Optional[Array] = None
        self.parents = parents
        self._fwd = fwd
        self._vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or ("leaf" if not self.parents else "node")
        return f"Tensor({label}, shape={self.value.shape})"


ComputationRecord = list  # list[Tensor] in topological order, leaves first


def tensor(value, name: Optional[str] = None) -> Tensor:
    """A leaf node (parameter or constant input)."""
    return Tensor(value, name=name)


constant = tensor


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b), fwd=lambda: a.value + b.value)
    out._vjp = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))
    return out


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value, (a, b), fwd=lambda: a.value - b.value)
    out._vjp = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, (a, b), fwd=lambda: a.value * b.value)
    out._vjp = lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    )
    return out


def divide(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value / b.value, (a, b), fwd=lambda: a.value / b.value)
    out._vjp = lambda g: (
        _unbroadcast(g / b.value, a.value.shape),
        _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
    )
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value * c, (a,), fwd=lambda: a.value * c)
    out._vjp = lambda g: (g * c,)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = Tensor(a.value @ b.value, (a, b), fwd=lambda: a.value @ b.value)
    out._vjp = lambda g: (g @ b.value.T, a.value.T @ g)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.value.T.copy(), (a,), fwd=lambda: a.value.T.copy())
    out._vjp = lambda g: (g.T,)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.value.reshape(shape), (a,), fwd=lambda: a.value.reshape(shape))
    out._vjp = lambda g: (g.reshape(a.value.shape),)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    out = Tensor(
        np.concatenate([p.value for p in parts], axis=axis),
        parts,
        fwd=lambda: np.concatenate([p.value for p in parts], axis=axis),
    )
    sizes = [p.value.shape[axis] for p in parts]

    def vjp(g):
        grads = []
        offset = 0
        for size in sizes:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            grads.append(g[tuple(index)])
            offset += size
        return tuple(grads)

    out._vjp = vjp
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.value[index].copy(), (a,), fwd=lambda: a.value[index].copy())

    def vjp(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    out._vjp = vjp
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.value.sum(), (a,), fwd=lambda: a.value.sum())
    out._vjp = lambda g: (np.broadcast_to(g, a.value.shape).copy(),)
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(
        a.value.sum(axis=axis, keepdims=keepdims),
        (a,),
        fwd=lambda: a.value.sum(axis=axis, keepdims=keepdims),
    )

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    out._vjp = vjp
    return out


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(a, axis, keepdims), 1.0 / a.value.shape[axis])


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.value), (a,), fwd=lambda: np.exp(a.value))
    out._vjp = lambda g: (g * out.value,)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.value), (a,), fwd=lambda: np.tanh(a.value))
    out._vjp = lambda g: (g * (1.0 - out.value * out.value),)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def fwd():
        x = a.value
        pos = x >= 0
        z = np.empty_like(x)
        z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        z[~pos] = ex / (1.0 + ex)
        return z

    out = Tensor(fwd(), (a,), fwd=fwd)
    out._vjp = lambda g: (g * out.value * (1.0 - out.value),)
    return out


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.value), (a,), fwd=lambda: np.abs(a.value))
    out._vjp = lambda g: (g * np.sign(a.value),)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    def fwd():
        shifted = a.value - a.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    out = Tensor(fwd(), (a,), fwd=fwd)

    def vjp(g):
        y = out.value
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    out._vjp = vjp
    return out


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""

    def fwd():
        x, z = logits.value, targets.value
        return np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))

    out = Tensor(fwd(), (logits, targets), fwd=fwd)

    def vjp(g):
        x, z = logits.value, targets.value
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (
            _unbroadcast(g * (sig - z), x.shape),
            _unbroadcast(g * (-x), z.shape),
        )

    out._vjp = vjp
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b."""
    return add(matmul(x, w), b)


@dataclass
class AttentionParams:
    """Projection weights for one attention block.

    Projections are bias-free: a key bias shifts every score in a softmax row
    by the same amount and thus cannot affect the output at all.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    params: AttentionParams,
    num_heads: int,
) -> Tensor:
    """Multi-head scaled-dot-product attention over 2-D token matrices."""
    d = q_in.value.shape[-1]
    if d % num_heads != 0:
        raise ValueError(f"model dim {d} is not divisible by {num_heads} heads")
    d_head = d // num_heads
    q = matmul(q_in, params.wq)
    k = matmul(k_in, params.wk)
    v = matmul(v_in, params.wv)
    heads = []
    for h in range(num_heads):
        qs = narrow(q, 1, h * d_head, d_head)
        ks = narrow(k, 1, h * d_head, d_head)
        vs = narrow(v, 1, h * d_head, d_head)
        scores = scale(matmul(qs, transpose(ks)), 1.0 / math.sqrt(d_head))
        weights = softmax(scores, axis=-1)
        heads.append(matmul(weights, vs))
    merged = concat(heads, axis=1) if len(heads) > 1 else heads[0]
    return matmul(merged, params.wo)


def trace(root: Tensor) -> ComputationRecord:
    """Topological order (leaves first) of every node reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> ComputationRecord:
    """Accumulate gradients of a scalar loss into .grad over the whole record."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
    record = trace(loss)
    for node in record:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(record):
        if node.grad is None or node._vjp is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + pg
    return record


def replay(record: ComputationRecord) -> None:
    """Recompute every non-leaf value from the current leaf values."""
    for node in record:
        if node._fwd is not None:
            node.value = np.asarray(node._fwd(), dtype=np.float64)


def gradient_map(loss: Tensor, params: dict[str, Tensor]) -> dict[str, Array]:
    """Gradients per named parameter; unreachable parameters get zeros."""
    backward(loss)
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }


def grad_check(
    loss: Tensor,
    params: Sequence[Tensor] | dict[str, Tensor],
    max_coords_per_param: int = 4,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Finite differences rerun the recorded computation via replay, so any
    data-dependent routing baked into the record stays fixed; the comparison
    therefore checks the differentiated function itself. Returns 0.0 for an
    empty parameter set.
    """
    if isinstance(params, dict):
        params = list(params.values())
    if not params:
        return 0.0
    record = backward(loss)
    if not np.all(np.isfinite(loss.value)):
        raise ValueError("non-finite loss during gradient check")
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for p in params
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga_full in zip(params, analytic):
        n = p.value.size
        coords = rng.permutation(n)[: min(max_coords_per_param, n)]
        for flat_idx in coords:
            original = p.value.flat[flat_idx]
            p.value.flat[flat_idx] = original + step
            replay(record)
            f_plus = float(loss.value)
            p.value.flat[flat_idx] = original - step
            replay(record)
            f_minus = float(loss.value)
            p.value.flat[flat_idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic_val = float(ga_full.flat[flat_idx])
            err = abs(analytic_val - numeric) / max(1e-8, abs(analytic_val) + abs(numeric))
            worst = max(worst, err)
    replay(record)
    return worst
