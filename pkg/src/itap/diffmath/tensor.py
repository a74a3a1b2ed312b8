"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records every differentiable operation in execution order (which is
already a valid topological order), so the backward pass is a single reverse
sweep that visits each node exactly once.  Ops executed without an active
tape, or whose inputs do not require gradients, skip all bookkeeping and run
at plain numpy speed; planner-side inference relies on this.

Float64 is used for gradient checking, float32 everywhere else.  Results are
deterministic for a fixed process/BLAS configuration.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "tensor_matmul",
    "swap_axes",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "layer_norm",
    "softmax_with_temperature",
    "log_softmax",
    "cross_entropy",
    "cross_entropy_mean",
    "embedding",
    "concat_last",
    "concat_seq",
    "take_row",
    "stop_gradient",
    "passthrough",
    "dropout",
    "backward",
]


class Tensor:
    """A dense array plus the gradient slot the backward pass accumulates into."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    # Operator sugar so model code reads like arithmetic.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return tensor_matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered record of forward ops, enabling one reverse sweep."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False


def _record(out: Tensor, inputs, backward_fn):
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(out, inputs, backward_fn))
    return out


def tensor(values, dtype=None, requires_grad: bool = False) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def constant(values) -> Tensor:
    """A tensor gradients never flow into."""
    return Tensor(np.asarray(values), requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values + b.values)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.values.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values - b.values)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.values.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values * b.values)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.values.shape))

    return _record(out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values * a.values.dtype.type(s))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * a.values.dtype.type(s))

    return _record(out, (a,), bwd)


def tensor_matmul(a, b) -> Tensor:
    """Matrix product; supports leading batch dimensions on either side."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape[-1] != b.values.shape[-2 if b.values.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions do not match: {a.values.shape} @ {b.values.shape}"
        )
    out = Tensor(a.values @ b.values)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.values.shape))

    return _record(out, (a, b), bwd)


def swap_axes(a, i: int, j: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.values, i, j))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, i, j))

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.values.shape
    out = Tensor(a.values.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _record(out, (a,), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.values.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.values.shape).copy())

    return _record(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size if axis is None else np.prod(
        [a.values.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.values, 0))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.values > 0))

    return _record(out, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(gain.values * xhat + bias.values)
    n = x.values.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.values.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.values.shape))
        if x.requires_grad:
            gx = g * gain.values
            dvar = (gx * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
            dmu = -(gx * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / n) * centered.sum(
                axis=-1, keepdims=True
            )
            x._accumulate(gx * inv + dvar * 2.0 * centered / n + dmu / n)

    return _record(out, (x, gain, bias), bwd)


def softmax_with_temperature(logits, temperature: float) -> Tensor:
    """Stable softmax of ``logits / temperature`` over the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = _as_tensor(logits)
    z = logits.values / logits.values.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(probs)

    def bwd(g):
        if logits.requires_grad:
            inner = (g * probs).sum(axis=-1, keepdims=True)
            logits._accumulate(probs * (g - inner) / temperature)

    return _record(out, (logits,), bwd)


def log_softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    z = logits.values - logits.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(out.values)
            logits._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return _record(out, (logits,), bwd)


def cross_entropy(logits, target_index: int) -> Tensor:
    """Negative log softmax probability of one class of a logit vector."""
    logits = _as_tensor(logits)
    if logits.values.ndim != 1:
        raise ValueError("cross_entropy expects a 1-D logit vector")
    k = logits.values.shape[0]
    if not (0 <= target_index < k):
        raise IndexError(f"target index {target_index} out of range for {k} classes")
    z = logits.values - logits.values.max()
    lse = np.log(np.exp(z).sum())
    out = Tensor(np.asarray(lse - z[target_index], dtype=logits.values.dtype))

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(z - lse)
            probs[target_index] -= 1.0
            logits._accumulate(g * probs)

    return _record(out, (logits,), bwd)


def cross_entropy_mean(logits, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under rows of ``logits``."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    flat = logits.values.reshape(-1, logits.values.shape[-1])
    idx = targets.reshape(-1)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= flat.shape[1]:
        raise IndexError("target index out of range")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = z[np.arange(flat.shape[0]), idx]
    out = Tensor(np.asarray((lse - picked).mean(), dtype=logits.values.dtype))

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(z - lse[:, None])
            probs[np.arange(flat.shape[0]), idx] -= 1.0
            logits._accumulate((g * probs / flat.shape[0]).reshape(logits.values.shape))

    return _record(out, (logits,), bwd)


def embedding(table, indices) -> Tensor:
    """Row gather from a 2-D table; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.values[idx])

    def bwd(g):
        if table.requires_grad:
            acc = np.zeros_like(table.values)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.values.shape[-1]))
            table._accumulate(acc)

    return _record(out, (table,), bwd)


def concat_last(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=-1))
    widths = [p.values.shape[-1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accumulate(g[..., off : off + w])
            off += w

    return _record(out, tuple(parts), bwd)


def concat_seq(parts) -> Tensor:
    """Concatenate along the second-to-last (sequence) axis."""
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=-2))
    lengths = [p.values.shape[-2] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, lengths):
            if p.requires_grad:
                p._accumulate(g[..., off : off + n, :])
            off += n

    return _record(out, tuple(parts), bwd)


def take_row(a, index: int) -> Tensor:
    """Select one position along the sequence axis: (..., seq, d) -> (..., d)."""
    a = _as_tensor(a)
    out = Tensor(a.values[..., index, :].copy())

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[..., index, :] = g
            a._accumulate(full)

    return _record(out, (a,), bwd)


def stop_gradient(a) -> Tensor:
    """Forward identity that blocks all gradient flow."""
    a = _as_tensor(a)
    return Tensor(a.values.copy())


def passthrough(a, values) -> Tensor:
    """Forward takes ``values`` verbatim; backward treats the op as identity on ``a``.

    This is the straight-through construction: the replacement is used
    bit-exactly in the forward pass while gradients flow to ``a`` unchanged.
    """
    a = _as_tensor(a)
    values = np.asarray(values, dtype=a.values.dtype)
    if values.shape != a.values.shape:
        raise ValueError(f"passthrough shape mismatch: {values.shape} vs {a.values.shape}")
    out = Tensor(values.copy())

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)

    return _record(out, (a,), bwd)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    a = _as_tensor(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.values.shape) >= p).astype(a.values.dtype) / (1.0 - p)
    out = Tensor(a.values * keep)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return _record(out, (a,), bwd)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep: populate ``.grad`` of every tensor the loss depends on."""
    if loss.values.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        node.backward_fn(node.out.grad)
