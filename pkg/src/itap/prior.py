"""Depth-aware autoregressive prior over residual code stacks.

A causal temporal trunk summarizes past macro steps, each embedded as the SUM
of its per-depth code embeddings (one slot per macro step, never one per
depth), with the query slot carrying only the current observation.  A shared
MLP depth head then predicts the codes of the queried stack coarse-to-fine,
conditioned on the trunk context, a depth embedding, and the partial sum of
the already-chosen shallower codes.

Sampling uses per-depth top-k, temperature-scaled categorical draws; the
greedy limit is truncation to the single largest logit, not temperature zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .rqvae import CodeStack, Codebook

__all__ = [
    "PriorModel",
    "DepthDistribution",
    "trunk_forward",
    "depth_logits",
    "prior_nll",
    "top_k_temperature_categorical",
    "sample_stack",
    "sample_stacks",
    "stack_log_prob",
]


@dataclass
class DepthDistribution:
    """Logits over the codebook for one (time, depth) slot."""

    logits: np.ndarray  # (K,)

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()


class PriorModel:
    def __init__(
        self,
        obs_dim: int,
        codebook_size: int,
        depth: int,
        context_len: int,
        d_latent: int = 16,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        d_ff: int = 256,
        depth_emb_dim: int = 16,
        head_hidden: int = 128,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.obs_dim = obs_dim
        self.codebook_size = codebook_size
        self.depth = depth
        self.context_len = context_len  # max PAST stacks the trunk accepts is context_len + 1
        self.d_latent = d_latent
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.depth_emb_dim = depth_emb_dim
        self.head_hidden = head_hidden
        self.obs_mean = np.zeros(obs_dim, dtype=np.float32)
        self.obs_std = np.ones(obs_dim, dtype=np.float32)
        self.dropout_p = 0.0  # active only while train_rng is set
        self.train_rng: np.random.Generator | None = None

        rng = np.random.default_rng(seed)
        self.store = dm.ParameterStore(dtype)
        s = self.store
        s.create("code_emb", (codebook_size, d_latent), rng)
        s.create("in_code.w", (d_latent, d_model), rng)
        s.create("in_code.b", (d_model,), rng, init="zeros")
        s.create("in_obs.w", (obs_dim, d_model), rng)
        s.create("in_obs.b", (d_model,), rng, init="zeros")
        s.create("pos", (context_len + 2, d_model), rng)
        dm.transformer_init(s, "trunk", n_layers, d_model, n_heads, d_ff, rng)
        s.create("depth_emb", (depth, depth_emb_dim), rng)
        head_in = d_model + depth_emb_dim + d_latent
        s.create("head.0.w", (head_in, head_hidden), rng)
        s.create("head.0.b", (head_hidden,), rng, init="zeros")
        s.create("head.1.w", (head_hidden, head_hidden), rng)
        s.create("head.1.b", (head_hidden,), rng, init="zeros")
        s.create("head.2.w", (head_hidden, codebook_size), rng)
        s.create("head.2.b", (codebook_size,), rng, init="zeros")

    def init_code_embeddings(self, codebook: Codebook) -> None:
        """Start the (trainable) code table from the frozen tokenizer codebook."""
        if codebook.entries.shape != self.store["code_emb"].values.shape:
            raise ValueError("codebook shape does not match code embedding table")
        self.store["code_emb"].values = codebook.entries.astype(
            self.store["code_emb"].values.dtype
        ).copy()

    def set_obs_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.obs_mean = np.asarray(mean, dtype=np.float32)
        self.obs_std = np.asarray(std, dtype=np.float32)

    def _std_obs(self, obs: np.ndarray) -> np.ndarray:
        return ((np.asarray(obs, dtype=np.float32) - self.obs_mean) / self.obs_std).astype(
            np.float32
        )

    # -- forward pieces (batched; B leading) ----------------------------------

    def trunk_batch(self, stacks: np.ndarray, obs: np.ndarray) -> dm.Tensor:
        """Context vectors (B, d_model) for B queries sharing context length n.

        ``stacks`` is (B, n, D) int; n may be 0 (cold start: the query slot is
        the whole sequence).  Slot i < n holds the embedded i-th past stack;
        slot n holds the projected observation.  Causal attention means the
        query output sees every slot, and nothing sees slots past itself.
        """
        b, n = stacks.shape[0], stacks.shape[1]
        if n > self.context_len + 1:
            raise ValueError(f"context of {n} stacks exceeds capacity {self.context_len + 1}")
        if stacks.size and (stacks.min() < 0 or stacks.max() >= self.codebook_size):
            raise ValueError("code index out of range")
        s = self.store
        obs_in = dm.linear(dm.tensor(self._std_obs(obs)[:, None, :]), s["in_obs.w"], s["in_obs.b"])
        if n > 0:
            emb = dm.embedding(s["code_emb"], stacks)  # (B, n, D, d_latent)
            summed = dm.reduce_sum(emb, axis=2)
            code_in = dm.linear(summed, s["in_code.w"], s["in_code.b"])
            x = dm.concat_seq([code_in, obs_in])
        else:
            x = obs_in
        x = dm.add(x, _pos_prefix(s["pos"], n + 1))
        h = dm.transformer_forward(
            s, "trunk", x, self.n_layers, self.n_heads,
            drop_p=self.dropout_p if self.train_rng is not None else 0.0,
            drop_rng=self.train_rng,
        )
        return dm.take_row(h, n)

    def head_batch(self, h: dm.Tensor, level: int, partial: dm.Tensor) -> dm.Tensor:
        """Logits (B, K) for depth ``level`` (1-based) given context and partial sum."""
        if not (1 <= level <= self.depth):
            raise ValueError(f"depth level {level} outside 1..{self.depth}")
        b = h.values.shape[0]
        demb = dm.embedding(self.store["depth_emb"], np.full(b, level - 1, dtype=np.int64))
        x = dm.concat_last([h, demb, partial])
        return dm.mlp_forward(self.store, "head", x, 3)

    def config_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "codebook_size": self.codebook_size,
            "depth": self.depth,
            "context_len": self.context_len,
            "d_latent": self.d_latent,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "depth_emb_dim": self.depth_emb_dim,
            "head_hidden": self.head_hidden,
        }


def _pos_prefix(pos: dm.Tensor, n: int) -> dm.Tensor:
    from .diffmath.tensor import _record

    out = dm.Tensor(pos.values[:n])

    def bwd(g):
        if pos.requires_grad:
            full = np.zeros_like(pos.values)
            full[:n] = g
            pos._accumulate(full)

    return _record(out, (pos,), bwd)


def _ctx_batch(model: PriorModel, context_stacks: Sequence[CodeStack]) -> np.ndarray:
    if len(context_stacks) == 0:
        return np.zeros((1, 0, model.depth), dtype=np.int64)
    return np.array([list(s.indices) for s in context_stacks], dtype=np.int64)[None]


def trunk_forward(model: PriorModel, context_stacks: Sequence[CodeStack], obs) -> np.ndarray:
    """Context vector h for one query; see PriorModel.trunk_batch."""
    return model.trunk_batch(_ctx_batch(model, context_stacks), np.asarray(obs)[None]).values[0]


def depth_logits(
    model: PriorModel, h: np.ndarray, level: int, partial_sum: np.ndarray | None = None
) -> DepthDistribution:
    """Distribution over codes at one depth; the level-1 partial sum is zero."""
    if partial_sum is None:
        partial_sum = np.zeros(model.d_latent, dtype=np.float32)
    out = model.head_batch(
        dm.Tensor(np.asarray(h, dtype=np.float32)[None]),
        level,
        dm.Tensor(np.asarray(partial_sum, dtype=np.float32)[None]),
    )
    return DepthDistribution(logits=out.values[0])


def prior_nll(
    model: PriorModel, contexts: np.ndarray, obs: np.ndarray, targets: np.ndarray
) -> dm.Tensor:
    """Mean over the batch of the summed per-depth cross-entropies.

    ``contexts`` is (B, n, D) int (same n for the whole batch), ``targets``
    (B, D).  Shallower codes are teacher-forced from the targets.
    """
    targets = np.asarray(targets, dtype=np.int64)
    b = targets.shape[0]
    h = model.trunk_batch(contexts, obs)
    t_emb = dm.embedding(model.store["code_emb"], targets)  # (B, D, d_latent)
    total = None
    partial = dm.Tensor(np.zeros((b, model.d_latent), dtype=np.float32))
    for lvl in range(1, model.depth + 1):
        logits = model.head_batch(h, lvl, partial)
        ce = dm.cross_entropy_mean(logits, targets[:, lvl - 1])
        total = ce if total is None else dm.add(total, ce)
        if lvl < model.depth:
            partial = dm.add(partial, dm.take_row(t_emb, lvl - 1))
    return total


def top_k_temperature_categorical(
    logits: np.ndarray, temperature: float, top_k: int, rng: np.random.Generator
) -> int:
    """Sample among the top_k largest logits after temperature renormalization.

    top_k == 1 is the greedy path and ignores the temperature entirely.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[0]
    if not (1 <= top_k <= k):
        raise ValueError(f"top_k must be in 1..{k}, got {top_k}")
    if top_k == 1:
        return int(np.argmax(logits))
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0 when top_k > 1, got {temperature}")
    order = np.lexsort((np.arange(k), -logits))  # by logit desc, then index asc
    kept = order[:top_k]
    z = logits[kept] / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    r = rng.random()
    pick = int(np.searchsorted(np.cumsum(p), r, side="right"))
    return int(kept[min(pick, top_k - 1)])


def _log_softmax_np(u: np.ndarray) -> np.ndarray:
    z = u - u.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_stack(
    model: PriorModel,
    context_stacks: Sequence[CodeStack],
    obs,
    depth: int,
    temperatures: Sequence[float],
    top_ks: Sequence[int],
    rng: np.random.Generator,
) -> tuple[CodeStack, float]:
    """Draw one full code stack depth-by-depth; also return its model log-probability.

    The log-probability is under the untruncated, temperature-1 distribution,
    which is what tree search uses as the edge prior score.
    """
    stacks, lps = sample_stacks(
        model,
        _ctx_batch(model, context_stacks),
        np.asarray(obs)[None],
        depth,
        temperatures,
        top_ks,
        [rng],
    )
    return stacks[0], float(lps[0])


def sample_stacks(
    model: PriorModel,
    contexts: np.ndarray,
    obs: np.ndarray,
    depth: int,
    temperatures: Sequence[float],
    top_ks: Sequence[int],
    rngs: Sequence[np.random.Generator],
) -> tuple[list[CodeStack], np.ndarray]:
    """Batched stack sampling; row i draws from rngs[i] so schedules are
    reproducible regardless of batch composition."""
    b = contexts.shape[0]
    h = model.trunk_batch(contexts, obs)
    picked = np.zeros((b, depth), dtype=np.int64)
    logps = np.zeros(b)
    partial = np.zeros((b, model.d_latent), dtype=np.float32)
    for lvl in range(1, depth + 1):
        logits = model.head_batch(h, lvl, dm.Tensor(partial)).values
        logsm = _log_softmax_np(logits.astype(np.float64))
        for i in range(b):
            k = top_k_temperature_categorical(
                logits[i], float(temperatures[lvl - 1]), int(top_ks[lvl - 1]), rngs[i]
            )
            picked[i, lvl - 1] = k
            logps[i] += logsm[i, k]
        partial = partial + model.store["code_emb"].values[picked[:, lvl - 1]]
    return [CodeStack(tuple(row)) for row in picked], logps


def stack_log_prob(
    model: PriorModel, context_stacks: Sequence[CodeStack], obs, stack: CodeStack
) -> float:
    """Exact chain-rule log-probability of one stack under the prior."""
    h = trunk_forward(model, context_stacks, obs)
    partial = np.zeros(model.d_latent, dtype=np.float32)
    lp = 0.0
    for lvl, k in enumerate(stack.indices, start=1):
        dist = depth_logits(model, h, lvl, partial)
        lp += float(_log_softmax_np(dist.logits.astype(np.float64))[k])
        partial = partial + model.store["code_emb"].values[k]
    return lp
