"""Training loops for the tokenizer and the code-stack prior.

Both loops are fully deterministic from the config seed: chunk sampling,
parameter init, and codebook updates all draw from generators derived from
it, so rerunning a config reproduces the checkpoint byte for byte.
"""

from __future__ import annotations

import numpy as np

from .. import diffmath as dm
from ..core import Episode, MacroToken, apply_token_mask, sample_training_chunk, segment_episode
from ..prior import PriorModel, prior_nll
from ..rqvae import (
    Codebook,
    FieldStats,
    RqVaeModel,
    TokenBatch,
    ema_batch_update,
    quantize_rows,
    rqvae_loss,
    straight_through,
)
from .config import RunConfig, config_to_text
from .dataio import write_checkpoint

__all__ = [
    "NumericalDivergenceError",
    "train_rqvae",
    "train_prior",
    "rqvae_blocks",
    "prior_blocks",
    "model_from_blocks",
    "prior_from_blocks",
    "save_models",
    "load_models",
]


class NumericalDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def _episode_tokens(episodes, cfg: RunConfig):
    token_lists = [segment_episode(ep, cfg.macro_len, cfg.gamma) for ep in episodes]
    token_lists = [t for t in token_lists if len(t) >= 2]
    if not token_lists:
        raise ValueError("dataset yields no episodes with at least 2 macro tokens")
    return token_lists


def _sample_chunks(token_lists, cfg: RunConfig, rng: np.random.Generator):
    """Uniform chunk sampling, with a fraction of deliberately truncated
    episodes so padded cold-start windows appear in training."""
    chunks = []
    for _ in range(cfg.batch_size):
        toks = token_lists[int(rng.integers(0, len(token_lists)))]
        if cfg.cold_start_frac > 0 and rng.random() < cfg.cold_start_frac:
            hi = min(len(toks), cfg.context_len + 2)
            keep = int(rng.integers(2, hi + 1))
            toks = toks[:keep]
        chunks.append(sample_training_chunk(toks, cfg.context_len, rng))
    return chunks


def _new_rqvae(cfg: RunConfig, obs_dim: int, act_dim: int) -> RqVaeModel:
    return RqVaeModel(
        obs_dim=obs_dim,
        act_dim=act_dim,
        macro_len=cfg.macro_len,
        context_len=cfg.context_len,
        d_latent=cfg.d_latent,
        codebook_size=cfg.codebook_size,
        depth=cfg.depth,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        alpha_tail=cfg.alpha_tail,
        alpha_ctx=cfg.alpha_ctx,
        beta_ps=cfg.beta_ps,
        ema_decay=cfg.ema_decay,
        seed=cfg.seed,
    )


def train_rqvae(cfg: RunConfig, episodes: list[Episode], log=None):
    """Train the tokenizer; returns (model, per-step loss records)."""
    token_lists = _episode_tokens(episodes, cfg)
    obs_dim = token_lists[0][0].observation.shape[0]
    act_dim = token_lists[0][0].macro_action.shape[1]
    model = _new_rqvae(cfg, obs_dim, act_dim)
    model.stats = FieldStats.from_tokens([t for toks in token_lists for t in toks])

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    model.dropout_p = cfg.dropout
    model.train_rng = rng
    records = []
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    for step in range(cfg.rqvae_steps):
        raw = _sample_chunks(token_lists, cfg, rng)
        masked = [apply_token_mask(ch, model.mask_spec) for ch in raw]
        batch = TokenBatch.from_chunks(masked, raw)
        b, t = batch.shape
        with dm.Tape() as tape:
            z = model.encode_batch(batch)
            z_flat = z.values.reshape(b * t, model.d_latent)
            if not model.codebook.initialized:
                pool = z_flat[~batch.pad.reshape(-1)]
                model.codebook.data_init(pool, rng)
            idx, partials, res_in = quantize_rows(
                z_flat, model.codebook, model.depth, skip=batch.pad.reshape(-1)
            )
            zq = straight_through(z, partials[:, -1].reshape(b, t, model.d_latent))
            recon = model.decode_latents(zq, batch.obs[:, model.context_len])
            loss, breakdown = rqvae_loss(
                model, batch, recon, z, partials.reshape(b, t, model.depth, model.d_latent)
            )
            if not np.isfinite(breakdown.total):
                raise NumericalDivergenceError(
                    f"tokenizer loss became non-finite at step {step}: {breakdown}"
                )
            model.store.zero_grad()
            dm.backward(tape, loss)
        dm.adam_step(model.store, cfg.learning_rate, betas=betas, eps=cfg.adam_eps)
        ema_batch_update(
            model.codebook,
            idx,
            res_in,
            keep=~batch.pad.reshape(-1),
            dead_after=cfg.dead_code_batches,
            reseed_pool=z_flat[~batch.pad.reshape(-1)],
            rng=rng,
        )
        records.append(
            {
                "step": step,
                "total": breakdown.total,
                "recon_tail": breakdown.recon_tail,
                "recon_ctx": breakdown.recon_ctx,
                "commit": float(breakdown.commit_per_depth.mean()),
            }
        )
        if log and (step % max(1, cfg.rqvae_steps // 20) == 0 or step == cfg.rqvae_steps - 1):
            log(f"rqvae step {step}: total={breakdown.total:.5f} tail={breakdown.recon_tail:.5f}")
    model.train_rng = None
    return model, records


def _chunk_code_queries(model: RqVaeModel, raw_chunks):
    """Turn chunks into prior training queries via the frozen tokenizer.

    Each chunk yields two queries: predict the current stack from the context
    stacks and the current observation, and predict the next stack from the
    context-plus-current stacks and the next observation.  Queries are grouped
    by context length so each group batches into one dense array.
    """
    masked = [apply_token_mask(ch, model.mask_spec) for ch in raw_chunks]
    batch = TokenBatch.from_chunks(masked)
    b, t = batch.shape
    c = model.context_len
    z = model.encode_batch(batch).values
    idx, _, _ = quantize_rows(
        z.reshape(b * t, model.d_latent), model.codebook, model.depth, skip=batch.pad.reshape(-1)
    )
    stacks = idx.reshape(b, t, model.depth)
    groups = {}
    for i, ch in enumerate(raw_chunks):
        pad = ch.pad_count
        obs_cur = ch.tokens[c].observation
        obs_nxt = ch.tokens[c + 1].observation
        ctx_a = stacks[i, pad:c]
        ctx_b = stacks[i, pad : c + 1]
        groups.setdefault(ctx_a.shape[0], []).append((ctx_a, obs_cur, stacks[i, c]))
        groups.setdefault(ctx_b.shape[0], []).append((ctx_b, obs_nxt, stacks[i, c + 1]))
    return groups


def train_prior(cfg: RunConfig, episodes: list[Episode], rqvae_model: RqVaeModel, log=None):
    """Train the stack prior on frozen-tokenizer code sequences; NLL objective."""
    token_lists = _episode_tokens(episodes, cfg)
    model = PriorModel(
        obs_dim=rqvae_model.obs_dim,
        codebook_size=rqvae_model.codebook_size,
        depth=rqvae_model.depth,
        context_len=rqvae_model.context_len,
        d_latent=rqvae_model.d_latent,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        depth_emb_dim=cfg.depth_emb_dim,
        head_hidden=cfg.head_hidden,
        seed=cfg.seed + 1,
    )
    model.init_code_embeddings(rqvae_model.codebook)
    model.set_obs_stats(rqvae_model.stats.obs_mean, rqvae_model.stats.obs_std)

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    model.dropout_p = cfg.dropout
    model.train_rng = rng
    records = []
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    for step in range(cfg.prior_steps):
        raw = _sample_chunks(token_lists, cfg, rng)
        groups = _chunk_code_queries(rqvae_model, raw)
        total_queries = sum(len(v) for v in groups.values())
        with dm.Tape() as tape:
            loss = None
            for n in sorted(groups):
                items = groups[n]
                ctx = np.stack([it[0] for it in items]).astype(np.int64)
                obs = np.stack([it[1] for it in items])
                tgt = np.stack([it[2] for it in items]).astype(np.int64)
                g = prior_nll(model, ctx, obs, tgt)
                g = dm.scale(g, len(items) / total_queries)
                loss = g if loss is None else dm.add(loss, g)
            value = float(loss.values)
            if not np.isfinite(value):
                raise NumericalDivergenceError(f"prior loss became non-finite at step {step}")
            model.store.zero_grad()
            dm.backward(tape, loss)
        dm.adam_step(model.store, cfg.learning_rate, betas=betas, eps=cfg.adam_eps)
        records.append({"step": step, "nll": value, "per_slot": value / rqvae_model.depth})
        if log and (step % max(1, cfg.prior_steps // 20) == 0 or step == cfg.prior_steps - 1):
            log(f"prior step {step}: nll={value:.5f}")
    model.train_rng = None
    return model, records


# -- checkpoint packing --------------------------------------------------------


def rqvae_blocks(model: RqVaeModel) -> dict[str, np.ndarray]:
    out = model.store.state_dict()
    out["codebook.entries"] = model.codebook.entries
    out["codebook.ema_cluster_size"] = model.codebook.ema_cluster_size
    out["codebook.ema_embed_sum"] = model.codebook.ema_embed_sum
    st = model.stats
    out["stats.scalar"] = np.array(
        [st.rtg_mean, st.rtg_std, st.mret_mean, st.mret_std], dtype=np.float32
    )
    out["stats.obs_mean"] = st.obs_mean
    out["stats.obs_std"] = st.obs_std
    out["stats.act_mean"] = st.act_mean
    out["stats.act_std"] = st.act_std
    return out


def prior_blocks(model: PriorModel) -> dict[str, np.ndarray]:
    out = model.store.state_dict()
    out["obs_mean"] = model.obs_mean
    out["obs_std"] = model.obs_std
    return out


def model_from_blocks(cfg: RunConfig, block: dict[str, np.ndarray]) -> RqVaeModel:
    model = _new_rqvae(cfg, cfg.obs_dim, cfg.act_dim)
    params = {k: v for k, v in block.items() if not k.startswith(("codebook.", "stats."))}
    model.store.load_state_dict(params)
    model.codebook = Codebook(
        entries=block["codebook.entries"],
        ema_cluster_size=block["codebook.ema_cluster_size"].astype(np.float64),
        ema_embed_sum=block["codebook.ema_embed_sum"].astype(np.float64),
        decay=cfg.ema_decay,
    )
    sc = block["stats.scalar"]
    model.stats = FieldStats(
        rtg_mean=float(sc[0]),
        rtg_std=float(sc[1]),
        mret_mean=float(sc[2]),
        mret_std=float(sc[3]),
        obs_mean=block["stats.obs_mean"],
        obs_std=block["stats.obs_std"],
        act_mean=block["stats.act_mean"],
        act_std=block["stats.act_std"],
    )
    return model


def prior_from_blocks(cfg: RunConfig, block: dict[str, np.ndarray]) -> PriorModel:
    model = PriorModel(
        obs_dim=cfg.obs_dim,
        codebook_size=cfg.codebook_size,
        depth=cfg.depth,
        context_len=cfg.context_len,
        d_latent=cfg.d_latent,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        depth_emb_dim=cfg.depth_emb_dim,
        head_hidden=cfg.head_hidden,
        seed=cfg.seed + 1,
    )
    params = {k: v for k, v in block.items() if k not in ("obs_mean", "obs_std")}
    model.store.load_state_dict(params)
    model.set_obs_stats(block["obs_mean"], block["obs_std"])
    return model


def save_models(path: str, cfg: RunConfig, rqvae_model: RqVaeModel, prior_model: PriorModel | None):
    blocks = {"rqvae": rqvae_blocks(rqvae_model)}
    if prior_model is not None:
        blocks["prior"] = prior_blocks(prior_model)
    write_checkpoint(path, blocks, config_to_text(cfg))


def load_models(path: str):
    """Returns (cfg, rqvae model, prior model or None)."""
    from .dataio import read_checkpoint
    from .config import parse_config_text

    blocks, config_text = read_checkpoint(path)
    cfg = parse_config_text(config_text)
    if "rqvae" not in blocks:
        raise ValueError("checkpoint is missing the tokenizer block")
    rq = model_from_blocks(cfg, blocks["rqvae"])
    pr = prior_from_blocks(cfg, blocks["prior"]) if "prior" in blocks else None
    return cfg, rq, pr
