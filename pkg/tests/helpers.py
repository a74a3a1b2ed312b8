"""Shared test utilities: finite-difference oracle, tiny model factories."""

import numpy as np

import itap.diffmath as dm
from itap.core import MacroToken
from itap.prior import PriorModel
from itap.rqvae import RqVaeModel


def fd_gradcheck(fn, params, eps=1e-5, floor=1e-3):
    """Max relative error between tape gradients and central finite differences.

    ``fn`` rebuilds the scalar loss from the current parameter values; the
    check perturbs every coordinate of every parameter (keep them small).
    """
    with dm.Tape() as tape:
        loss = fn()
    for p in params:
        p.grad = None
    # grads may already exist from the forward; recompute cleanly
    with dm.Tape() as tape:
        loss = fn()
    dm.backward(tape, loss)
    worst = 0.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        num = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(fn().values)
            flat[i] = orig - eps
            lm = float(fn().values)
            flat[i] = orig
            nflat[i] = (lp - lm) / (2 * eps)
        rel = np.abs(g - num) / np.maximum(np.abs(num), floor)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def random_tokens(n, obs_dim=3, act_dim=2, macro_len=3, rng=None):
    rng = rng or np.random.default_rng(0)
    return [
        MacroToken(
            rtg=float(rng.standard_normal()),
            macro_return=float(rng.standard_normal()),
            observation=rng.standard_normal(obs_dim).astype(np.float32),
            macro_action=rng.uniform(-1, 1, size=(macro_len, act_dim)).astype(np.float32),
        )
        for _ in range(n)
    ]


def tiny_rqvae(seed=0, **kw):
    args = dict(
        obs_dim=3,
        act_dim=2,
        macro_len=3,
        context_len=2,
        d_latent=6,
        codebook_size=8,
        depth=2,
        d_model=16,
        n_layers=1,
        n_heads=2,
        d_ff=32,
        seed=seed,
    )
    args.update(kw)
    return RqVaeModel(**args)


def tiny_prior(seed=0, **kw):
    args = dict(
        obs_dim=3,
        codebook_size=8,
        depth=2,
        context_len=2,
        d_latent=6,
        d_model=16,
        n_layers=1,
        n_heads=2,
        d_ff=32,
        depth_emb_dim=4,
        head_hidden=16,
        seed=seed,
    )
    args.update(kw)
    return PriorModel(**args)
