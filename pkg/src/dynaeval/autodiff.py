"""Reverse-mode automatic differentiation over dense numpy tensors.

Provides exactly the primitives the transformer needs: matmul, elementwise
add/mul, GeLU, layer norm, softmax, softmax cross-entropy, embedding gather,
scaled dot-product attention with additive bias, reshape/transpose/concat and
scalar reductions. Operations record onto the active :class:`Tape`; calling
``Tape.backward`` populates ``grad`` on every reachable tensor that has
``requires_grad`` set.

All arithmetic runs in the dtype of the participating tensors (float32 for
evaluation runs, float64 for gradient checks). Reductions go through numpy,
whose summation order is fixed for a given shape, so identical inputs give
bit-identical outputs and gradients.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "constant",
    "add",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "gelu",
    "layer_norm",
    "softmax",
    "softmax_cross_entropy",
    "embedding",
    "attention",
    "reduce_sum",
    "reduce_mean",
    "zero_grads",
    "grad_check",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Dense real array with optional gradient storage.

    ``data`` is a row-major numpy array; ``grad``, once populated, always has
    the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the underlying array."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class _TapeOp:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tape_stack = threading.local()


def _stack() -> list:
    if not hasattr(_tape_stack, "stack"):
        _tape_stack.stack = []
    return _tape_stack.stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    The record is topological by construction: an operation is appended only
    after its inputs exist. ``backward`` walks it in reverse, accumulating
    gradients into every ``requires_grad`` tensor reachable from the loss.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        self._ops.append(_TapeOp(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of ``loss`` w.r.t. every requires_grad tensor."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for op in reversed(self._ops):
            out_grad = op.output.grad
            if out_grad is None:
                continue
            grads = op.backward_fn(out_grad)
            for tensor, grad in zip(op.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad.astype(tensor.dtype, copy=False)
                else:
                    tensor.grad = tensor.grad + grad.astype(tensor.dtype, copy=False)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active and grads flow."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.dtype.type(c)

    def backward(g):
        return (g * x.dtype.type(c),)

    return _make(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with dA = g @ B^T and dB = A^T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = np.argsort(axes)
    out = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _make(out, (x,), backward)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _make(out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """GeLU in the tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * dgelu,)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm needs eps > 0, got {eps}")
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ValueError("layer_norm over an empty last axis")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out = norm * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * norm).sum(axis=reduce_axes) if gain.requires_grad else None
        gbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * gain.data
            gx = inv_std * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - norm * (gn * norm).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(out.astype(xd.dtype, copy=False), (x, gain, bias), backward)


def _softmax_last(xd: np.ndarray) -> np.ndarray:
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    p = _softmax_last(x.data)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p.astype(x.dtype, copy=False), (x,), backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood in nats, stable via max subtraction.

    ``logits`` is [T x V]; ``targets`` an integer sequence of length T with
    every entry in [0, V).
    """
    ids = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [T x V] logits, got {logits.shape}")
    t_len, vocab = logits.shape
    if ids.shape != (t_len,):
        raise ValueError(f"targets length {ids.shape} does not match logits rows {t_len}")
    bad = np.nonzero((ids < 0) | (ids >= vocab))[0]
    if bad.size:
        pos = int(bad[0])
        raise IndexError(
            f"target {int(ids[pos])} out of range [0, {vocab}) at position {pos}"
        )
    xd = logits.data
    m = xd.max(axis=-1, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    nll = lse - xd[np.arange(t_len), ids]

    def backward(g):
        p = _softmax_last(xd)
        p[np.arange(t_len), ids] -= 1.0
        return (p * g[:, None],)

    return _make(nll.astype(xd.dtype, copy=False), (logits,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = np.nonzero((idx < 0) | (idx >= vocab))[0]
    if bad.size:
        pos = int(bad[0])
        raise IndexError(f"token id {int(idx[pos])} out of range [0, {vocab}) at position {pos}")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, bias, scale_factor: float) -> Tensor:
    """Scaled dot-product attention with an additive bias.

    Shapes: q [H x Tq x dk], k [H x Tk x dk], v [H x Tk x dv], bias
    broadcastable to [H x Tq x Tk] (a Tensor or a plain array; masks and
    positional penalties ride in here as -inf / negative entries). Rows of
    the softmax are taken over the key axis.
    """
    bias_t = bias if isinstance(bias, Tensor) else None
    bias_data = bias.data if bias_t is not None else np.asarray(bias)
    s = np.einsum("hqd,hkd->hqk", q.data, k.data) * q.dtype.type(scale_factor) + bias_data
    p = _softmax_last(s)
    out = np.einsum("hqk,hkd->hqd", p, v.data)

    inputs = (q, k, v) if bias_t is None else (q, k, v, bias_t)

    def backward(g):
        dp = np.einsum("hqd,hkd->hqk", g, v.data)
        dot = (dp * p).sum(axis=-1, keepdims=True)
        ds = p * (dp - dot)
        gq = np.einsum("hqk,hkd->hqd", ds, k.data) * q.dtype.type(scale_factor) if q.requires_grad else None
        gk = np.einsum("hqk,hqd->hkd", ds, q.data) * q.dtype.type(scale_factor) if k.requires_grad else None
        gv = np.einsum("hqk,hqd->hkd", p, g) if v.requires_grad else None
        if bias_t is None:
            return gq, gk, gv
        gb = _unbroadcast(ds, bias_t.shape) if bias_t.requires_grad else None
        return gq, gk, gv, gb

    return _make(out.astype(q.dtype, copy=False), inputs, backward)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum() / x.dtype.type(n), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g / x.dtype.type(n), x.shape).copy(),)

    return _make(out, (x,), backward)


def _projection_weights(shape: tuple) -> np.ndarray:
    # Non-uniform so constant-sum outputs (softmax rows) stay checkable, yet
    # exact powers of two so linear maps difference exactly.
    n = int(np.prod(shape)) if shape else 1
    cycle = np.array([1.0, 0.5, 2.0, 0.25, 4.0, 0.125, 8.0, 0.0625])
    return np.resize(cycle, n).reshape(shape)


def grad_check(f: Callable, inputs: Sequence[Tensor], fd_step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The (possibly tensor-valued) output of ``f`` is reduced to a scalar by a
    fixed power-of-two weighted sum; analytic gradients of that scalar are
    compared coordinate-wise against central differences with step
    ``fd_step``. Any NaN in the evaluation reports as +inf rather than
    raising.
    """
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    tensors = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    weights: Optional[np.ndarray] = None

    def loss_value(ts) -> float:
        out = f(*ts)
        return float((out.data * weights).sum())

    with Tape() as tape:
        out = f(*tensors)
        weights = _projection_weights(out.shape)
        loss = reduce_sum(mul(out, constant(weights, dtype=out.dtype)))
        tape.backward(loss)

    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            hi = loss_value(tensors)
            flat[i] = orig - fd_step
            lo = loss_value(tensors)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * fd_step)
            a = analytic.reshape(-1)[i]
            if not (math.isfinite(fd) and math.isfinite(a)):
                return math.inf
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
