"""Parameter management, attention/transformer building blocks, and Adam.

Everything here is sized for desk-scale models (two attention layers, width
64 by default).  Parameters live in a ParameterStore keyed by dotted names so
checkpointing is a flat name -> array map.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat_last,
    dropout,
    layer_norm,
    relu,
    reshape,
    softmax_with_temperature,
    swap_axes,
    tensor_matmul,
)

__all__ = [
    "ParameterStore",
    "adam_step",
    "linear",
    "mlp_forward",
    "causal_self_attention",
    "transformer_init",
    "transformer_forward",
]


class ParameterStore:
    """Named parameter tensors plus Adam moment accumulators.

    Initialization is uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the
    seeded generator handed to ``create``, so whole-model construction is
    reproducible from a single seed.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, shape, rng: np.random.Generator, init: str = "fan_in") -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(shape)
        if init == "fan_in":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            raise ValueError(f"unknown init: {init}")
        t = Tensor(values.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros(shape, dtype=self.dtype)
        self.v[name] = np.zeros(shape, dtype=self.dtype)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, arr in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter in state: {k}")
            if self.params[k].values.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {k}: {self.params[k].values.shape} vs {arr.shape}"
                )
            self.params[k].values = arr.astype(self.dtype)


def adam_step(store: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Adaptive-moment update with bias correction; skips gradient-free params."""
    store.step_count += 1
    b1, b2 = betas
    t = store.step_count
    for name, p in store.params.items():
        if p.grad is None:
            continue
        g = p.grad
        store.m[name] = b1 * store.m[name] + (1 - b1) * g
        store.v[name] = b2 * store.v[name] + (1 - b2) * (g * g)
        mhat = store.m[name] / (1 - b1**t)
        vhat = store.v[name] / (1 - b2**t)
        p.values = p.values - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.values.dtype)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = tensor_matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def mlp_forward(store: ParameterStore, prefix: str, x, n_layers: int) -> Tensor:
    """ReLU MLP: layers named {prefix}.{i}.w / {prefix}.{i}.b."""
    h = x
    for i in range(n_layers):
        h = linear(h, store[f"{prefix}.{i}.w"], store[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            h = relu(h)
    return h


def causal_self_attention(x, wq, wk, wv, wo, n_heads: int) -> Tensor:
    """Multi-head self-attention with a strict causal mask.

    ``x`` is (..., seq, d); position t of the output depends only on
    positions <= t of the input.
    """
    d = x.values.shape[-1]
    seq = x.values.shape[-2]
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by heads {n_heads}")
    dh = d // n_heads
    lead = x.values.shape[:-2]

    q = tensor_matmul(x, wq)
    k = tensor_matmul(x, wk)
    v = tensor_matmul(x, wv)

    def split(t):  # (..., seq, d) -> (..., heads, seq, dh)
        t = reshape(t, lead + (seq, n_heads, dh))
        return swap_axes(t, -2, -3)

    q, k, v = split(q), split(k), split(v)
    scores = tensor_matmul(q, swap_axes(k, -1, -2))
    scores = scale_scores(scores, 1.0 / np.sqrt(dh), seq)
    attn = softmax_with_temperature(scores, 1.0)
    mixed = tensor_matmul(attn, v)
    mixed = swap_axes(mixed, -2, -3)
    mixed = reshape(mixed, lead + (seq, d))
    return tensor_matmul(mixed, wo)


_NEG = -1e30


def scale_scores(scores, factor: float, seq: int) -> Tensor:
    """Scale attention scores and apply the causal mask additively."""
    from .tensor import scale

    mask = np.triu(np.full((seq, seq), _NEG, dtype=scores.values.dtype), k=1)
    return add(scale(scores, factor), Tensor(mask))


def transformer_init(
    store: ParameterStore,
    prefix: str,
    n_layers: int,
    d_model: int,
    n_heads: int,
    d_ff: int,
    rng: np.random.Generator,
) -> None:
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        store.create(f"{p}.ln1.g", (d_model,), rng, init="ones")
        store.create(f"{p}.ln1.b", (d_model,), rng, init="zeros")
        for name in ("wq", "wk", "wv", "wo"):
            store.create(f"{p}.attn.{name}", (d_model, d_model), rng)
        store.create(f"{p}.ln2.g", (d_model,), rng, init="ones")
        store.create(f"{p}.ln2.b", (d_model,), rng, init="zeros")
        store.create(f"{p}.ff.w1", (d_model, d_ff), rng)
        store.create(f"{p}.ff.b1", (d_ff,), rng, init="zeros")
        store.create(f"{p}.ff.w2", (d_ff, d_model), rng)
        store.create(f"{p}.ff.b2", (d_model,), rng, init="zeros")
    store.create(f"{prefix}.lnf.g", (d_model,), rng, init="ones")
    store.create(f"{prefix}.lnf.b", (d_model,), rng, init="zeros")


def transformer_forward(
    store: ParameterStore,
    prefix: str,
    x,
    n_layers: int,
    n_heads: int,
    drop_p: float = 0.0,
    drop_rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm causal transformer stack over (..., seq, d_model)."""
    h = x
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        a = layer_norm(h, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        a = causal_self_attention(
            a,
            store[f"{p}.attn.wq"],
            store[f"{p}.attn.wk"],
            store[f"{p}.attn.wv"],
            store[f"{p}.attn.wo"],
            n_heads,
        )
        if drop_p > 0.0 and drop_rng is not None:
            a = dropout(a, drop_p, drop_rng)
        h = add(h, a)
        f = layer_norm(h, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
        f = linear(f, store[f"{p}.ff.w1"], store[f"{p}.ff.b1"])
        f = relu(f)
        f = linear(f, store[f"{p}.ff.w2"], store[f"{p}.ff.b2"])
        if drop_p > 0.0 and drop_rng is not None:
            f = dropout(f, drop_p, drop_rng)
        h = add(h, f)
    return layer_norm(h, store[f"{prefix}.lnf.g"], store[f"{prefix}.lnf.b"])
