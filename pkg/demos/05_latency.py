"""Decision-latency benchmark: cost versus context length and lookahead depth.

Uses untrained models (latency does not depend on the weights' values), a
12-step context window, and a small number of timed calls per cell so the
script stays quick; the acceptance suite runs the tighter version.
"""

from itap.harness import RunConfig, bench_latency
from itap.prior import PriorModel
from itap.rqvae import RqVaeModel

import numpy as np

cfg = RunConfig(context_len=12, iterations=50, bench_warmup=2, bench_measure=10)
rq = RqVaeModel(
    obs_dim=6, act_dim=2, macro_len=cfg.macro_len, context_len=12,
    d_latent=cfg.d_latent, codebook_size=cfg.codebook_size, depth=cfg.depth,
    d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
)
rng = np.random.default_rng(0)
rq.codebook.data_init(rng.standard_normal((256, rq.d_latent)), rng)
pr = PriorModel(
    obs_dim=6, codebook_size=cfg.codebook_size, depth=cfg.depth, context_len=12,
    d_latent=cfg.d_latent, d_model=cfg.d_model, n_layers=cfg.n_layers,
    n_heads=cfg.n_heads, d_ff=cfg.d_ff,
)
pr.init_code_embeddings(rq.codebook)

report = bench_latency(cfg, rq, pr, contexts=[1, 3, 6, 12], horizons=[1, 3], candidates=[8])
print(report.to_text())
print("csv form:")
print(report.latency_csv())
