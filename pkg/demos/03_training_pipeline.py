"""Train the tokenizer and the code-stack prior on a small pooled dataset.

Deliberately scaled down (a few hundred steps) so the whole script runs in
about a minute; the acceptance suite trains the full desk-scale version.
"""

import numpy as np

from itap.envs import generate_offline_dataset
from itap.harness import RunConfig, train_prior, train_rqvae
from itap.harness.training import save_models, load_models

cfg = RunConfig(
    episodes_per_cell=10,
    rqvae_steps=400,
    prior_steps=400,
    batch_size=32,
)
episodes = generate_offline_dataset(
    cfg.env, cfg.train_regimes, cfg.tiers, cfg.episodes_per_cell, cfg.seed,
    max_steps=cfg.episode_steps, f_scale=cfg.f_scale,
)
print(f"pooled dataset: {len(episodes)} episodes across regimes {cfg.train_regimes} "
      f"and tiers {cfg.tiers}")

print("\n=== tokenizer ===")
rq, recs = train_rqvae(cfg, episodes, log=None)
print("step    total    tail recon")
for r in recs[:: len(recs) // 8]:
    print(f"{r['step']:>5}  {r['total']:.4f}   {r['recon_tail']:.4f}")
used = int((rq.codebook.usage_counts > 0).sum())
print(f"codebook entries used at least once: {used}/{rq.codebook_size}")

print("\n=== prior over code stacks ===")
pr, precs = train_prior(cfg, episodes, rq, log=None)
ln_k = np.log(cfg.codebook_size)
print("step    nll/slot   (uniform bound)")
for r in precs[:: len(precs) // 8]:
    print(f"{r['step']:>5}   {r['per_slot']:.4f}    ({ln_k:.4f})")

print("\n=== checkpoint round trip ===")
from dataclasses import replace

path = "/tmp/demo_models.itck"
save_models(path, replace(cfg, obs_dim=rq.obs_dim, act_dim=rq.act_dim), rq, pr)
_, rq2, pr2 = load_models(path)
same = all(
    np.array_equal(rq.store.params[k].values, rq2.store.params[k].values)
    for k in rq.store.params
)
print(f"saved to {path}; parameters identical after reload: {same}")
