"""Tape-based reverse-mode automatic differentiation on dense arrays.

Every differentiable operation appends one record to the active tape; append
order is a topological order of the dataflow graph, so ``backward`` simply
replays the tape in reverse.  The tape is rebuilt on every forward pass and
consumed by ``backward``.

Training runs on float32.  The ops are dtype-generic so gradient checking can
run the same graph in float64, where the finite-difference oracle is reliable
at the tolerances asserted in the tests.

There is no general broadcasting: binary ops demand equal shapes, and the few
ops that do mix shapes (bias_add, layer_norm, embedding_gather, col_permute)
state their rule explicitly.  Shape violations raise ShapeError naming the op.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes unusable for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf; the computation is in an error state."""


class Tensor:
    """Dense array plus accumulated gradient.

    ``requires_grad`` marks trainable leaves; outputs of recorded ops inherit
    it so gradients can flow through intermediates.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # float32 is the training dtype; numpy data that is already a float
        # keeps its precision (the finite-difference oracle runs in float64).
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    # Arithmetic sugar for readable model code; these call the recorded ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Recorded tape of ops for one forward pass."""

    __slots__ = ("ops", "consumed")

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False


_graph = Graph()
_grad_enabled = True


def reset_graph() -> None:
    """Drop the current tape and start a fresh one."""
    global _graph
    _graph = Graph()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, frozen passes)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("op %r produced a non-finite value" % name)


def apply_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap computed forward data as a tensor, recording the backward rule.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in order.  This is the extension point for ops with bespoke
    gradient semantics (straight-through estimators live in the model code).
    """
    _check_finite(name, out_data)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        if _graph.consumed:
            reset_graph()
        _graph.ops.append(_Op(name, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring tensor.

    ``loss`` must be scalar.  Walks the tape in reverse recording order and
    consumes it; a tensor feeding several ops receives the sum of the
    gradients from each use.
    """
    if loss.data.ndim != 0:
        raise ShapeError("backward needs a scalar loss, got shape %s" % (loss.shape,))
    if _graph.consumed:
        raise RuntimeError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any requires_grad tensor")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for op in reversed(_graph.ops):
        g_out = op.output.grad
        if g_out is None:
            continue
        grads = op.backward_fn(g_out)
        for t, g in zip(op.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    "backward of %r produced gradient shape %s for input shape %s"
                    % (op.name, g.shape, t.data.shape)
                )
            t.grad = g if t.grad is None else t.grad + g
    _graph.consumed = True
    _graph.ops.clear()


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError("%s: %s" % (op, msg))


def constant(data) -> Tensor:
    """Tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Core ops.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D@2D, 3D@2D (shared right operand), or 3D@3D batched."""
    an, bn = a.ndim, b.ndim
    _require(an in (2, 3) and bn in (2, 3), "matmul",
             "ranks must be 2 or 3, got %d and %d" % (an, bn))
    _require(not (an == 2 and bn == 3), "matmul",
             "2D @ 3D is not supported")
    _require(a.shape[-1] == b.shape[-2], "matmul",
             "inner dims differ: %s @ %s" % (a.shape, b.shape))
    if an == 3 and bn == 3:
        _require(a.shape[0] == b.shape[0], "matmul",
                 "batch dims differ: %s @ %s" % (a.shape, b.shape))
    out = a.data @ b.data

    def bwd(g):
        if an == 2 and bn == 2:
            return g @ b.data.T, a.data.T @ g
        if an == 3 and bn == 2:
            # Right operand shared across the batch: sum its gradient over it.
            return g @ b.data.T, np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        return g @ np.swapaxes(b.data, 1, 2), np.swapaxes(a.data, 1, 2) @ g

    return apply_op("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "add", "shapes differ: %s vs %s" % (a.shape, b.shape))
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "sub", "shapes differ: %s vs %s" % (a.shape, b.shape))
    return apply_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "mul", "shapes differ: %s vs %s" % (a.shape, b.shape))
    return apply_op("mul", (a, b), a.data * b.data,
                    lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return apply_op("scalar_mul", (a,), a.data * s, lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return apply_op("relu", (a,), out, bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-function form, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return apply_op("gelu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (a,), out, bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    # Non-positive inputs surface here as Inf/NaN and are rejected.
    return apply_op("log", (a,), out, lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift.

    ``gain`` and ``bias`` are 1D of the last-axis size and apply to every row.
    """
    d = x.shape[-1]
    _require(gain.shape == (d,) and bias.shape == (d,), "layer_norm",
             "gain/bias must have shape (%d,), got %s and %s" % (d, gain.shape, bias.shape))
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        d_gain = np.sum(g * y, axis=lead)
        d_bias = np.sum(g, axis=lead)
        gy = g * gain.data
        m1 = np.mean(gy, axis=-1, keepdims=True)
        m2 = np.mean(gy * y, axis=-1, keepdims=True)
        dx = inv * (gy - m1 - y * m2)
        return dx, d_gain, d_bias

    return apply_op("layer_norm", (x, gain, bias), out, bwd)


def embedding_gather(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by an integer array; output shape indices.shape + (D,).

    Backward scatter-adds into the table, so repeated indices accumulate.
    """
    idx = np.asarray(indices)
    _require(np.issubdtype(idx.dtype, np.integer), "embedding_gather",
             "indices must be integers, got dtype %s" % idx.dtype)
    _require(table.ndim == 2, "embedding_gather",
             "table must be 2D, got shape %s" % (table.shape,))
    k = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(
            "embedding_gather: index out of range for table with %d rows" % k)
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return apply_op("embedding_gather", (table,), out, bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return apply_op("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _require(len(tensors) > 0, "concat", "needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(tensors), out, bwd)


def slice_(a: Tensor, key: tuple) -> Tensor:
    """Basic slicing (slices and ints only); backward scatters into zeros."""
    out = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return apply_op("slice", (a,), out, bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    out = a.data.transpose(ax)
    inv = np.argsort(ax)

    def bwd(g):
        return (g.transpose(inv),)

    return apply_op("transpose", (a,), out, bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        return (np.full_like(a.data, g / n),)

    return apply_op("mean", (a,), out, bwd)


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.full_like(a.data, g),)

    return apply_op("sum", (a,), out, bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1D bias over the last axis; gradient to the bias sums leading axes."""
    _require(b.ndim == 1 and x.shape[-1] == b.shape[0], "bias_add",
             "bias shape %s does not match last axis of %s" % (b.shape, x.shape))
    out = x.data + b.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        return g, g.sum(axis=lead)

    return apply_op("bias_add", (x, b), out, bwd)


def col_permute(a: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder each column of a 2D tensor: out[i, j] = a[perm[i, j], j].

    ``perm`` holds, per column, a permutation of the row indices (resorting
    projections is the intended use; the permutation is a constant, computed
    outside the graph).  Backward scatter-adds through the same index map.
    """
    perm = np.asarray(perm)
    _require(a.ndim == 2 and perm.shape == a.shape, "col_permute",
             "need matching 2D shapes, got %s and %s" % (a.shape, perm.shape))
    cols = np.arange(a.shape[1])[None, :]
    out = a.data[perm, cols]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (perm, np.broadcast_to(cols, perm.shape)), g)
        return (ga,)

    return apply_op("col_permute", (a,), out, bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _require(pred.shape == target.shape, "mse_loss",
             "shapes differ: %s vs %s" % (pred.shape, target.shape))
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def bwd(g):
        d = (2.0 / n) * diff * g
        return d, -d

    return apply_op("mse_loss", (pred, target), out, bwd)


def cross_entropy_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` has shape (..., V); ``targets`` has the leading shape and holds
    class ids in [0, V).
    """
    idx = np.asarray(targets)
    _require(np.issubdtype(idx.dtype, np.integer), "cross_entropy_loss",
             "targets must be integers, got dtype %s" % idx.dtype)
    _require(idx.shape == logits.shape[:-1], "cross_entropy_loss",
             "targets shape %s does not match logits %s" % (idx.shape, logits.shape))
    v = logits.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError("cross_entropy_loss: target id out of range [0, %d)" % v)
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    flat_logp = logp.reshape(-1, v)
    flat_idx = idx.reshape(-1)
    n = flat_idx.size
    out = np.asarray(-flat_logp[np.arange(n), flat_idx].mean())

    def bwd(g):
        p = np.exp(flat_logp)
        p[np.arange(n), flat_idx] -= 1.0
        return ((g / n) * p.reshape(logits.data.shape),)

    return apply_op("cross_entropy_loss", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# Gradient checking.


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` must be a deterministic map from the given tensors to a scalar
    tensor.  The check is run in float64 regardless of input dtype: float32
    finite differences at h=1e-3 carry rounding noise of order 1e-4, which
    would swamp the tolerances this is used to enforce.
    """
    leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    reset_graph()
    out = f(*leaves)
    if out.data.ndim != 0:
        raise ShapeError("grad_check needs a scalar-valued f")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in leaves]

    worst = 0.0
    for t, an in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(f(*leaves).data)
            flat[i] = orig - h
            with no_grad():
                f_minus = float(f(*leaves).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(an_flat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(an_flat[i] - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# Optimization.


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place; ``step`` counts from 1."""
    if lr <= 0.0:
        raise ValueError("learning rate must be positive, got %g" % lr)
    if step < 1:
        raise ValueError("step counts from 1, got %d" % step)
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    """AdamW over a fixed list of parameter tensors; moments start at zero."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1.5e-4,
        beta1: float = 0.9,
        beta2: float = 0.95,
        weight_decay: float = 0.0,
        eps: float = 1e-8,
    ):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive, got %g" % lr)
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the accumulated grads, then clear them."""
        self.step_count += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, m, v, self.step_count, self.lr,
                       self.beta1, self.beta2, self.weight_decay, self.eps)
        for p in self.params:
            p.grad = None
