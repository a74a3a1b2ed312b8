"""One planning decision, inside out; then closed-loop ablations.

Trains mid-scale models (a few minutes); the decoded lookahead scores need a
reasonably fit decoder before search reliably beats the prior-only arm.

Shows the cached search tree built from prior samples and decoded lookahead
scores, the visit distribution after tree search, and the value of planning
(lookahead on vs. off) and of context in closed-loop evaluation.
"""

import numpy as np

from itap.envs import generate_offline_dataset
from itap.harness import RunConfig, evaluate_policy, train_prior, train_rqvae
from itap.harness.evaluate import planner_config_from
from itap.planner import build_latent_tree, dump_tree, plan_step, simulate_once
from itap.rqvae import encode_history_to_codes

cfg = RunConfig(episodes_per_cell=15, rqvae_steps=1500, prior_steps=1500,
                eval_seeds=2, eval_episodes=4)
episodes = generate_offline_dataset(
    cfg.env, cfg.train_regimes, cfg.tiers, cfg.episodes_per_cell, cfg.seed,
    max_steps=cfg.episode_steps, f_scale=cfg.f_scale,
)
rq, _ = train_rqvae(cfg, episodes)
pr, _ = train_prior(cfg, episodes, rq)
print("models trained (small scale)")

print("\n=== anatomy of one decision ===")
rng = np.random.default_rng(0)
obs = np.array([0.2, -0.3, 0.0, 0.0, -0.5, 0.4], dtype=np.float32)
history = [
    (-1.2, obs + 0.01 * rng.standard_normal(6).astype(np.float32),
     rng.uniform(-1, 1, (cfg.macro_len, 2)).astype(np.float32))
    for _ in range(3)
]
print(f"history of {len(history)} macro steps encodes to stacks:",
      [s.indices for s in encode_history_to_codes(rq, history)])

pcfg = planner_config_from(cfg, horizon=2, iterations=100)
tree = build_latent_tree(rq, pr, obs, history, pcfg, seed=7)
print(f"root candidates kept: {len(tree.root.edges)} "
      f"(from {pcfg.coarse_samples} x {pcfg.completions} proposals)")
for e in tree.root.edges[:4]:
    print(f"  stack {e.stack.indices}  prior logit {e.prior_logit:+.2f}  "
          f"lookahead score {e.score:+.3f}")

sim_rng = np.random.default_rng(1)
for _ in range(pcfg.iterations):
    simulate_once(tree, pcfg, sim_rng)
print("after search, root visit counts and values:")
for e in sorted(tree.root.edges, key=lambda e: -e.visit_count)[:4]:
    print(f"  stack {e.stack.indices}  N={e.visit_count:>3}  Q={e.q_value:+.3f}")

macro, tree2 = plan_step(rq, pr, obs, history, pcfg, seed=7)
print(f"chosen macro-action ({cfg.macro_len} primitive steps):\n{np.round(macro, 3)}")
print(f"tree dump is {len(dump_tree(tree2).splitlines())} records")

print("\n=== does planning help? (small evaluation) ===")
seeds = [0, 1]
for label, overrides in (("lookahead on  (H=2)", {"horizon": 2}),
                         ("lookahead off (H=0)", {"horizon": 0})):
    rep = evaluate_policy(cfg, rq, pr, cfg.train_regimes, seeds, 4, **overrides)
    print(f"{label}: mean return {rep.mean():8.3f}")

print("\n=== context ablation on the same models ===")
for c in (1, 4):
    rep = evaluate_policy(cfg, rq, pr, cfg.train_regimes, seeds, 4, horizon=2, context=c)
    print(f"context {c} macro steps: mean return {rep.mean():8.3f}")
