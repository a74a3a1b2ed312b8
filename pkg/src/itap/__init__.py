"""Offline planning in a learned discrete temporal-abstraction space.

Subpackages: core (trajectory types), diffmath (autodiff substrate), rqvae
(residual-quantized tokenizer), prior (code-stack sequence model), planner
(tree search over cached latent futures), envs (toy control tasks), harness
(persistence, training, evaluation, CLI).
"""

__version__ = "0.1.0"

from . import core, diffmath, envs, planner, prior, rqvae  # noqa: F401
