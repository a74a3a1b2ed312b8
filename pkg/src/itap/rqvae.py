"""Observation-conditioned residual-quantized autoencoder over token chunks.

The encoder is a small causal transformer mapping each (masked) macro-step
token to a latent vector; each latent is coded as a depth-D stack of indices
into one shared EMA codebook, quantizing the running residual coarse-to-fine;
the decoder, conditioned on the current boundary observation and the quantized
latents, reconstructs every field of every token.

Codebook entry 0 is pinned to the zero vector so that (a) deep stacks are
exact no-ops once the residual vanishes and (b) the all-zero stack is a
well-defined placeholder for padded positions at both training and
deployment time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .core import Chunk, ContextWindow, MacroToken, MaskSpec, apply_token_mask, zero_token

__all__ = [
    "Codebook",
    "CodeStack",
    "QuantizationResult",
    "FieldStats",
    "LossBreakdown",
    "RqVaeModel",
    "residual_quantize",
    "quantize_rows",
    "stack_latent",
    "ema_codebook_update",
    "ema_batch_update",
    "fit_codebook",
    "straight_through",
    "encode_chunk",
    "decode_chunk",
    "rqvae_loss",
    "encode_history_to_codes",
    "TokenBatch",
    "DecodedFields",
]

FIELD_COUNT = 4  # rtg, macro_return, observation, macro_action


@dataclass(frozen=True)
class CodeStack:
    """Depth-ordered tuple of codebook indices for one macro step."""

    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, i):
        return self.indices[i]


@dataclass
class QuantizationResult:
    stack: CodeStack
    partial_sums: np.ndarray  # (D, d) cumulative sums of chosen entries
    final: np.ndarray  # (d,) == partial_sums[-1]
    final_residual: np.ndarray  # (d,)


@dataclass
class Codebook:
    """Shared embedding table with EMA statistics and usage diagnostics."""

    entries: np.ndarray  # (K, d)
    ema_cluster_size: np.ndarray  # (K,)
    ema_embed_sum: np.ndarray  # (K, d)
    decay: float = 0.99
    epsilon: float = 1e-5
    usage_counts: np.ndarray = None  # (K,) total assignments ever
    unused_streak: np.ndarray = None  # (K,) consecutive batches without assignment
    initialized: bool = True

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.shape[0] < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.ema_cluster_size = np.asarray(self.ema_cluster_size, dtype=np.float64)
        self.ema_embed_sum = np.asarray(self.ema_embed_sum, dtype=np.float64)
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.size, dtype=np.int64)
        if self.unused_streak is None:
            self.unused_streak = np.zeros(self.size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def empty(cls, size: int, dim: int, decay: float = 0.99) -> "Codebook":
        """Placeholder codebook awaiting data initialization from encoder outputs."""
        return cls(
            entries=np.zeros((size, dim), dtype=np.float32),
            ema_cluster_size=np.ones(size),
            ema_embed_sum=np.zeros((size, dim)),
            decay=decay,
            initialized=False,
        )

    def data_init(self, vectors: np.ndarray, rng: np.random.Generator) -> None:
        """Seed entries from observed latent vectors; entry 0 stays pinned at zero."""
        vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        idx = rng.integers(0, len(vectors), size=self.size)
        self.entries = vectors[idx].copy()
        self.entries[0] = 0.0
        self.ema_cluster_size = np.ones(self.size)
        self.ema_embed_sum = self.entries.astype(np.float64).copy()
        self.initialized = True


def stack_latent(codebook: Codebook, stack: CodeStack) -> np.ndarray:
    """Final quantized vector of a stack: the sum of its code entries."""
    return codebook.entries[list(stack.indices)].sum(axis=0)


def residual_quantize(z: np.ndarray, codebook: Codebook, depth: int) -> QuantizationResult:
    """Greedy coarse-to-fine coding of one vector.

    Each level picks the entry nearest (squared L2) to the running residual;
    ties resolve to the lowest index.  Partial sums are exact cumulative sums
    of the chosen entries.
    """
    z = np.asarray(z, dtype=np.float32)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    indices, partials = [], []
    residual = z.copy()
    acc = np.zeros_like(z)
    for _ in range(depth):
        d2 = ((codebook.entries[None, :, :] - residual[None, None, :]) ** 2).sum(axis=-1)[0]
        k = int(np.argmin(d2))  # argmin returns the lowest index on ties
        indices.append(k)
        acc = acc + codebook.entries[k]
        partials.append(acc.copy())
        residual = residual - codebook.entries[k]
    return QuantizationResult(
        stack=CodeStack(tuple(indices)),
        partial_sums=np.stack(partials),
        final=acc,
        final_residual=residual,
    )


def quantize_rows(
    z: np.ndarray, codebook: Codebook, depth: int, skip: np.ndarray | None = None
):
    """Vectorized residual quantization of many rows at once.

    ``skip`` marks rows (e.g. padded positions) that are forced to the
    all-zero stack and excluded from assignment statistics.

    Returns (indices (N, D), partial_sums (N, D, d), residual_inputs (N, D, d))
    where residual_inputs[:, l] is the residual each level quantized, i.e. the
    vector that feeds the EMA statistics for the chosen code.
    """
    z = np.asarray(z, dtype=np.float32)
    n, d = z.shape
    e = codebook.entries
    indices = np.zeros((n, depth), dtype=np.int64)
    partials = np.zeros((n, depth, d), dtype=np.float32)
    res_inputs = np.zeros((n, depth, d), dtype=np.float32)
    residual = z.copy()
    acc = np.zeros_like(z)
    for lvl in range(depth):
        res_inputs[:, lvl] = residual
        # same arithmetic as residual_quantize so batched and single-vector
        # paths agree bit-for-bit, ties included
        d2 = ((e[None, :, :] - residual[:, None, :]) ** 2).sum(axis=-1)
        k = np.argmin(d2, axis=1)
        if skip is not None:
            k = np.where(skip, 0, k)
        indices[:, lvl] = k
        chosen = e[k]
        acc = acc + chosen
        partials[:, lvl] = acc
        residual = residual - chosen
    if skip is not None:
        partials[skip] = 0.0
    return indices, partials, res_inputs


def ema_codebook_update(codebook: Codebook, assigned: dict) -> Codebook:
    """Exponential-moving-average re-estimation from one batch of assignments.

    ``assigned`` maps code index -> list of the residual vectors that were
    quantized to that code.  Returns a new Codebook; the input is untouched.
    """
    counts = np.zeros(codebook.size)
    sums = np.zeros((codebook.size, codebook.dim))
    for k, vecs in assigned.items():
        for v in vecs:
            counts[k] += 1.0
            sums[k] += np.asarray(v, dtype=np.float64)
    new = Codebook(
        entries=codebook.entries.copy(),
        ema_cluster_size=codebook.ema_cluster_size.copy(),
        ema_embed_sum=codebook.ema_embed_sum.copy(),
        decay=codebook.decay,
        epsilon=codebook.epsilon,
        usage_counts=codebook.usage_counts.copy(),
        unused_streak=codebook.unused_streak.copy(),
        initialized=codebook.initialized,
    )
    _apply_ema(new, counts, sums)
    return new


def _apply_ema(codebook: Codebook, counts: np.ndarray, sums: np.ndarray) -> None:
    d = codebook.decay
    codebook.ema_cluster_size = d * codebook.ema_cluster_size + (1 - d) * counts
    codebook.ema_embed_sum = d * codebook.ema_embed_sum + (1 - d) * sums
    total = codebook.ema_cluster_size.sum()
    k = codebook.size
    smoothed = (codebook.ema_cluster_size + codebook.epsilon) / (
        total + k * codebook.epsilon
    ) * total
    denom = np.maximum(smoothed, codebook.epsilon)
    codebook.entries = (codebook.ema_embed_sum / denom[:, None]).astype(np.float32)
    codebook.entries[0] = 0.0  # pinned zero entry
    codebook.usage_counts += counts.astype(np.int64)
    codebook.unused_streak = np.where(counts > 0, 0, codebook.unused_streak + 1)


def ema_batch_update(
    codebook: Codebook,
    indices: np.ndarray,
    res_inputs: np.ndarray,
    keep: np.ndarray | None = None,
    dead_after: int = 100,
    reseed_pool: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """In-place EMA update from a quantize_rows result (training fast path).

    Codes unused for ``dead_after`` consecutive batches are re-seeded to a
    random vector from ``reseed_pool`` (current encoder outputs).
    """
    n, depth = indices.shape
    flat_idx = indices.reshape(-1)
    flat_res = res_inputs.reshape(-1, codebook.dim)
    if keep is not None:
        m = np.repeat(keep, depth)
        flat_idx = flat_idx[m]
        flat_res = flat_res[m]
    counts = np.bincount(flat_idx, minlength=codebook.size).astype(np.float64)
    sums = np.zeros((codebook.size, codebook.dim))
    np.add.at(sums, flat_idx, flat_res.astype(np.float64))
    _apply_ema(codebook, counts, sums)
    if reseed_pool is not None and rng is not None and len(reseed_pool):
        dead = np.flatnonzero(codebook.unused_streak >= dead_after)
        for k in dead:
            if k == 0:
                continue
            v = reseed_pool[int(rng.integers(0, len(reseed_pool)))]
            codebook.entries[k] = v.astype(np.float32)
            codebook.ema_cluster_size[k] = 1.0
            codebook.ema_embed_sum[k] = codebook.entries[k].astype(np.float64)
            codebook.unused_streak[k] = 0


def _cascade_init(vectors: np.ndarray, size: int, depth: int, rng: np.random.Generator):
    """Seed a shared codebook across scales: geometrically fewer entries per
    level, each level sampled from the residuals the previous levels leave.

    A single-scale init stalls the fit: once coarse entries cover the data,
    every deeper residual falls nearest to the pinned zero entry and finer
    structure is never claimed.
    """
    d = vectors.shape[1]
    entries = [np.zeros(d, dtype=np.float32)]
    weights = np.array([2.0**-l for l in range(depth)])
    alloc = np.maximum(1, np.round((size - 1) * weights / weights.sum())).astype(int)
    while alloc.sum() > size - 1:
        alloc[np.argmax(alloc)] -= 1
    alloc[0] += (size - 1) - alloc.sum()
    pool = vectors.copy()
    for lvl in range(depth):
        take = int(alloc[lvl])
        if take > 0:
            rows = rng.choice(len(pool), size=take, replace=len(pool) < take)
            entries.extend(pool[r].copy() for r in rows)
        e_arr = np.stack(entries)
        d2 = ((pool[:, None, :] - e_arr[None]) ** 2).sum(axis=-1)
        pool = pool - e_arr[np.argmin(d2, axis=1)]
    return np.stack(entries)


def fit_codebook(
    vectors: np.ndarray,
    size: int,
    depth: int,
    steps: int,
    rng: np.random.Generator,
    decay: float = 0.9,
    dead_after: int = 5,
) -> Codebook:
    """Train a standalone codebook on a fixed vector set by repeated EMA passes.

    Entries are cascade-initialized across scales, and dead entries are
    re-seeded from the pooled residual inputs of all depths.
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    cb = Codebook.empty(size, vectors.shape[1], decay=decay)
    entries = _cascade_init(vectors, size, depth, rng)
    cb.entries = entries
    cb.ema_cluster_size = np.ones(size)
    cb.ema_embed_sum = entries.astype(np.float64).copy()
    cb.initialized = True
    for _ in range(steps):
        idx, _, res = quantize_rows(vectors, cb, depth)
        ema_batch_update(
            cb,
            idx,
            res,
            dead_after=dead_after,
            reseed_pool=res.reshape(-1, cb.dim),
            rng=rng,
        )
    return cb


def straight_through(z: dm.Tensor, quantized: np.ndarray) -> dm.Tensor:
    """Quantized values forward, identity gradient to the encoder output."""
    return dm.passthrough(z, quantized)


@dataclass
class FieldStats:
    """Per-field standardization constants, estimated once from the dataset."""

    rtg_mean: float = 0.0
    rtg_std: float = 1.0
    mret_mean: float = 0.0
    mret_std: float = 1.0
    obs_mean: np.ndarray = None
    obs_std: np.ndarray = None
    act_mean: np.ndarray = None
    act_std: np.ndarray = None

    @classmethod
    def identity(cls, obs_dim: int, act_dim: int) -> "FieldStats":
        return cls(
            obs_mean=np.zeros(obs_dim, dtype=np.float32),
            obs_std=np.ones(obs_dim, dtype=np.float32),
            act_mean=np.zeros(act_dim, dtype=np.float32),
            act_std=np.ones(act_dim, dtype=np.float32),
        )

    @classmethod
    def from_tokens(cls, tokens: Sequence[MacroToken]) -> "FieldStats":
        rtg = np.array([t.rtg for t in tokens], dtype=np.float64)
        mret = np.array([t.macro_return for t in tokens], dtype=np.float64)
        obs = np.stack([t.observation for t in tokens]).astype(np.float64)
        act = np.concatenate([t.macro_action for t in tokens]).astype(np.float64)

        def _std(x, axis=None):
            s = x.std(axis=axis)
            return np.maximum(s, 1e-6)

        return cls(
            rtg_mean=float(rtg.mean()),
            rtg_std=float(_std(rtg)),
            mret_mean=float(mret.mean()),
            mret_std=float(_std(mret)),
            obs_mean=obs.mean(axis=0).astype(np.float32),
            obs_std=_std(obs, axis=0).astype(np.float32),
            act_mean=act.mean(axis=0).astype(np.float32),
            act_std=_std(act, axis=0).astype(np.float32),
        )


@dataclass
class LossBreakdown:
    total: float
    recon_tail: float
    recon_ctx: float
    commit_per_depth: np.ndarray  # (D,)


@dataclass
class TokenBatch:
    """Dense arrays for a batch of chunks: masked inputs, flags, raw targets."""

    rtg: np.ndarray  # (B, T) masked inputs, raw units
    mret: np.ndarray
    obs: np.ndarray  # (B, T, obs_dim)
    act: np.ndarray  # (B, T, L, act_dim)
    flags: np.ndarray  # (B, T, 4)
    pad: np.ndarray  # (B, T) bool
    target_rtg: np.ndarray = None  # unmasked originals, raw units
    target_mret: np.ndarray = None
    target_obs: np.ndarray = None
    target_act: np.ndarray = None

    @classmethod
    def from_chunks(cls, masked: Sequence[Chunk], raw: Sequence[Chunk] | None = None):
        def stack(chunks, attr):
            return np.stack(
                [np.stack([np.asarray(getattr(t, attr), dtype=np.float32) for t in ch.tokens]) for ch in chunks]
            )

        batch = cls(
            rtg=stack(masked, "rtg"),
            mret=stack(masked, "macro_return"),
            obs=stack(masked, "observation"),
            act=stack(masked, "macro_action"),
            flags=np.stack(
                [np.stack([t.mask_flags.as_array() for t in ch.tokens]) for ch in masked]
            ),
            pad=np.stack(
                [
                    np.array(
                        [i < ch.pad_count for i in range(len(ch.tokens))], dtype=bool
                    )
                    for ch in masked
                ]
            ),
        )
        if raw is not None:
            batch.target_rtg = stack(raw, "rtg")
            batch.target_mret = stack(raw, "macro_return")
            batch.target_obs = stack(raw, "observation")
            batch.target_act = stack(raw, "macro_action")
        return batch

    @property
    def shape(self):
        return self.rtg.shape


@dataclass
class DecodedFields:
    """Per-position reconstructions in raw (un-standardized) units."""

    rtg: np.ndarray  # (..., T)
    macro_return: np.ndarray  # (..., T)
    observation: np.ndarray  # (..., T, obs_dim)
    macro_action: np.ndarray  # (..., T, L, act_dim)


class RqVaeModel:
    """Tokenizer model: causal encoder, shared residual codebook, conditioned decoder."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        macro_len: int,
        context_len: int,
        d_latent: int = 16,
        codebook_size: int = 32,
        depth: int = 2,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        d_ff: int = 256,
        alpha_tail: float = 1.0,
        alpha_ctx: float = 0.1,
        beta_ps: float = 1.0,
        ema_decay: float = 0.99,
        seed: int = 0,
        dtype=np.float32,
    ):
        if alpha_tail < 0 or alpha_ctx < 0 or beta_ps < 0:
            raise ValueError("loss weights must be non-negative")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.macro_len = macro_len
        self.context_len = context_len
        self.d_latent = d_latent
        self.codebook_size = codebook_size
        self.depth = depth
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.alpha_tail = alpha_tail
        self.alpha_ctx = alpha_ctx
        self.beta_ps = beta_ps
        self.mask_spec = MaskSpec()
        self.stats = FieldStats.identity(obs_dim, act_dim)
        self.codebook = Codebook.empty(codebook_size, d_latent, decay=ema_decay)
        self.dropout_p = 0.0  # active only while train_rng is set
        self.train_rng: np.random.Generator | None = None

        self.feat_dim = 1 + 1 + obs_dim + macro_len * act_dim + FIELD_COUNT
        rng = np.random.default_rng(seed)
        self.store = dm.ParameterStore(dtype)
        s = self.store
        seq = context_len + 2
        s.create("enc.in.w", (self.feat_dim, d_model), rng)
        s.create("enc.in.b", (d_model,), rng, init="zeros")
        s.create("enc.pos", (seq, d_model), rng)
        dm.transformer_init(self.store, "enc.tf", n_layers, d_model, n_heads, d_ff, rng)
        s.create("enc.out.w", (d_model, d_latent), rng)
        s.create("enc.out.b", (d_latent,), rng, init="zeros")
        s.create("dec.in_z.w", (d_latent, d_model), rng)
        s.create("dec.in_z.b", (d_model,), rng, init="zeros")
        s.create("dec.in_obs.w", (obs_dim, d_model), rng)
        s.create("dec.pos", (seq, d_model), rng)
        dm.transformer_init(self.store, "dec.tf", n_layers, d_model, n_heads, d_ff, rng)
        s.create("dec.rtg.w", (d_model, 1), rng)
        s.create("dec.rtg.b", (1,), rng, init="zeros")
        s.create("dec.mret.w", (d_model, 1), rng)
        s.create("dec.mret.b", (1,), rng, init="zeros")
        s.create("dec.obs.w", (d_model, obs_dim), rng)
        s.create("dec.obs.b", (obs_dim,), rng, init="zeros")
        s.create("dec.act.w", (d_model, macro_len * act_dim), rng)
        s.create("dec.act.b", (macro_len * act_dim,), rng, init="zeros")

    # -- feature construction ------------------------------------------------

    def token_features(self, batch: TokenBatch) -> np.ndarray:
        """Standardize fields, zero the flagged ones, append flag indicators."""
        st = self.stats
        f = batch.flags
        rtg = ((batch.rtg - st.rtg_mean) / st.rtg_std) * (1.0 - f[..., 0])
        mret = ((batch.mret - st.mret_mean) / st.mret_std) * (1.0 - f[..., 1])
        obs = ((batch.obs - st.obs_mean) / st.obs_std) * (1.0 - f[..., 2:3])
        act = ((batch.act - st.act_mean) / st.act_std) * (1.0 - f[..., 3])[..., None, None]
        b, t = batch.rtg.shape
        return np.concatenate(
            [
                rtg[..., None],
                mret[..., None],
                obs,
                act.reshape(b, t, -1),
                f,
            ],
            axis=-1,
        ).astype(np.float32)

    def standardized_targets(self, batch: TokenBatch):
        st = self.stats
        b, t = batch.rtg.shape
        return (
            (batch.target_rtg - st.rtg_mean) / st.rtg_std,
            (batch.target_mret - st.mret_mean) / st.mret_std,
            (batch.target_obs - st.obs_mean) / st.obs_std,
            ((batch.target_act - st.act_mean) / st.act_std).reshape(b, t, -1),
        )

    # -- encoder / decoder ---------------------------------------------------

    def encode_batch(self, batch: TokenBatch) -> dm.Tensor:
        """Per-token latent features, (B, T, d_latent); causal over positions."""
        feats = self.token_features(batch)
        seq = feats.shape[1]
        if seq != self.context_len + 2:
            raise ValueError(
                f"chunk length {seq} does not match model context_len+2={self.context_len + 2}"
            )
        x = dm.linear(dm.tensor(feats), self.store["enc.in.w"], self.store["enc.in.b"])
        x = dm.add(x, self.store["enc.pos"])
        h = dm.transformer_forward(
            self.store, "enc.tf", x, self.n_layers, self.n_heads,
            drop_p=self.dropout_p if self.train_rng is not None else 0.0,
            drop_rng=self.train_rng,
        )
        return dm.linear(h, self.store["enc.out.w"], self.store["enc.out.b"])

    def decode_latents(self, zq: dm.Tensor, anchor_obs: np.ndarray):
        """Reconstruct all fields from quantized latents plus the anchor observation.

        ``zq`` is (B, T, d_latent) with T <= context_len + 2; the anchor is the
        raw current-boundary observation, broadcast to every position through
        the input adapter.  Returns standardized-space tensors.
        """
        seq = zq.values.shape[-2]
        st = self.stats
        obs_std = ((np.asarray(anchor_obs, dtype=np.float32) - st.obs_mean) / st.obs_std)
        x = dm.linear(zq, self.store["dec.in_z.w"], self.store["dec.in_z.b"])
        o = dm.tensor_matmul(dm.tensor(obs_std[..., None, :]), self.store["dec.in_obs.w"])
        x = dm.add(x, o)
        x = dm.add(x, _pos_slice(self.store["dec.pos"], seq))
        h = dm.transformer_forward(
            self.store, "dec.tf", x, self.n_layers, self.n_heads,
            drop_p=self.dropout_p if self.train_rng is not None else 0.0,
            drop_rng=self.train_rng,
        )
        return (
            dm.linear(h, self.store["dec.rtg.w"], self.store["dec.rtg.b"]),
            dm.linear(h, self.store["dec.mret.w"], self.store["dec.mret.b"]),
            dm.linear(h, self.store["dec.obs.w"], self.store["dec.obs.b"]),
            dm.linear(h, self.store["dec.act.w"], self.store["dec.act.b"]),
        )

    def unstandardize(self, rtg, mret, obs, act) -> DecodedFields:
        st = self.stats
        lead = act.shape[:-1]
        return DecodedFields(
            rtg=rtg * st.rtg_std + st.rtg_mean,
            macro_return=mret * st.mret_std + st.mret_mean,
            observation=obs * st.obs_std + st.obs_mean,
            macro_action=act.reshape(lead + (self.macro_len, self.act_dim)) * st.act_std
            + st.act_mean,
        )

    # -- persistence hooks ---------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "macro_len": self.macro_len,
            "context_len": self.context_len,
            "d_latent": self.d_latent,
            "codebook_size": self.codebook_size,
            "depth": self.depth,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "alpha_tail": self.alpha_tail,
            "alpha_ctx": self.alpha_ctx,
            "beta_ps": self.beta_ps,
            "ema_decay": self.codebook.decay,
        }


def _pos_slice(pos: dm.Tensor, seq: int) -> dm.Tensor:
    """Differentiable prefix of a positional table."""
    from .diffmath.tensor import _record

    out = dm.Tensor(pos.values[:seq])

    def bwd(g):
        if pos.requires_grad:
            full = np.zeros_like(pos.values)
            full[:seq] = g
            pos._accumulate(full)

    return _record(out, (pos,), bwd)


# -- module-level operations -------------------------------------------------


def encode_chunk(model: RqVaeModel, chunk: Chunk) -> np.ndarray:
    """Latent features for one masked chunk, (T, d_latent)."""
    batch = TokenBatch.from_chunks([chunk])
    return model.encode_batch(batch).values[0]


def decode_chunk(
    model: RqVaeModel, quantized: np.ndarray, anchor_obs: np.ndarray
) -> DecodedFields:
    """Reconstruct all token fields (raw units) from quantized latents."""
    zq = dm.tensor(np.asarray(quantized, dtype=np.float32)[None])
    rtg, mret, obs, act = model.decode_latents(zq, np.asarray(anchor_obs)[None])
    return model.unstandardize(
        rtg.values[0, :, 0], mret.values[0, :, 0], obs.values[0], act.values[0]
    )


def rqvae_loss(
    model: RqVaeModel,
    batch: TokenBatch,
    recon,
    z: dm.Tensor,
    partial_sums: np.ndarray,
):
    """Weighted reconstruction MSE plus the depth-averaged commitment term.

    Reconstruction targets are the unmasked originals (standardized); the last
    two positions carry weight alpha_tail, the context positions alpha_ctx.
    Padded positions are excluded everywhere.  The commitment term pulls the
    encoder output toward each stop-gradiented partial sum.
    """
    b, t = batch.rtg.shape
    c = t - 2
    rtg_t, mret_t, obs_t, act_t = model.standardized_targets(batch)
    rtg_hat, mret_hat, obs_hat, act_hat = recon

    valid = ~batch.pad
    tail_mask = np.zeros((b, t), dtype=np.float64)
    tail_mask[:, c:] = 1.0
    tail_mask *= valid
    ctx_mask = valid.astype(np.float64) - tail_mask

    n_elems = 1 + 1 + model.obs_dim + model.macro_len * model.act_dim

    def recon_term(mask):
        count = mask.sum()
        if count == 0:
            return dm.tensor(np.zeros((), dtype=z.values.dtype)), 0.0
        w = (mask / (count * n_elems)).astype(np.float32)
        sq = dm.reduce_sum(
            dm.mul(_sq(dm.sub(rtg_hat, dm.constant(rtg_t[..., None]))), dm.constant(w[..., None]))
        )
        sq = dm.add(sq, dm.reduce_sum(
            dm.mul(_sq(dm.sub(mret_hat, dm.constant(mret_t[..., None]))), dm.constant(w[..., None]))
        ))
        sq = dm.add(sq, dm.reduce_sum(
            dm.mul(_sq(dm.sub(obs_hat, dm.constant(obs_t))), dm.constant(w[..., None]))
        ))
        sq = dm.add(sq, dm.reduce_sum(
            dm.mul(_sq(dm.sub(act_hat, dm.constant(act_t))), dm.constant(w[..., None]))
        ))
        return sq, count

    tail_term, _ = recon_term(tail_mask)
    ctx_term, _ = recon_term(ctx_mask)

    n_valid = valid.sum()
    wv = (valid / max(n_valid * model.d_latent, 1)).astype(np.float32)
    commit_terms = []
    for lvl in range(model.depth):
        diff = dm.sub(z, dm.constant(partial_sums[:, :, lvl]))
        commit_terms.append(dm.reduce_sum(dm.mul(_sq(diff), dm.constant(wv[..., None]))))

    total = dm.add(dm.scale(tail_term, model.alpha_tail), dm.scale(ctx_term, model.alpha_ctx))
    commit_sum = commit_terms[0]
    for ct in commit_terms[1:]:
        commit_sum = dm.add(commit_sum, ct)
    total = dm.add(total, dm.scale(commit_sum, model.beta_ps / model.depth))

    breakdown = LossBreakdown(
        total=float(total.values),
        recon_tail=float(tail_term.values),
        recon_ctx=float(ctx_term.values),
        commit_per_depth=np.array([float(ct.values) for ct in commit_terms]),
    )
    return total, breakdown


def _sq(t: dm.Tensor) -> dm.Tensor:
    return dm.mul(t, t)


def encode_history_to_codes(model: RqVaeModel, history: Sequence) -> list[CodeStack]:
    """Code stacks for the most recent completed macro steps.

    ``history`` holds (macro_return, observation, macro_action) triples,
    oldest first.  The tokens are placed at the context positions of a padded
    chunk under the deployment mask (long return hidden everywhere, macro
    return visible in context), exactly as during training, so the resulting
    codes match the training-time context distribution.
    """
    hist = list(history)[-model.context_len :]
    if not hist:
        return []
    tokens = [
        MacroToken(
            rtg=0.0,
            macro_return=float(mr),
            observation=np.asarray(o, dtype=np.float32),
            macro_action=np.asarray(m, dtype=np.float32),
        )
        for (mr, o, m) in hist
    ]
    pad = model.context_len - len(tokens)
    pads = [zero_token(model.obs_dim, model.macro_len, model.act_dim) for _ in range(pad)]
    tail = [zero_token(model.obs_dim, model.macro_len, model.act_dim) for _ in range(2)]
    chunk = Chunk(tokens=pads + tokens + tail, context_len=model.context_len, pad_count=pad)
    chunk = apply_token_mask(chunk, model.mask_spec)
    z = encode_chunk(model, chunk)
    rows = z[pad : model.context_len]
    idx, _, _ = quantize_rows(rows, model.codebook, model.depth)
    return [CodeStack(tuple(row)) for row in idx]


def history_from_window(window: ContextWindow):
    """Planner-facing view of a context window: its raw entry triples."""
    return [(e[0], e[1], e[2]) for e in window.entries]
