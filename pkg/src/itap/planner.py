"""Tree search over cached code-stack futures.

A decision is made in two phases.  Construction: the prior proposes candidate
stacks level by level, each candidate is scored by decoding its immediate
macro return plus the decoded long return of a few sampled successors, and
only the best fraction is kept; the sampled successors stay cached on their
edge as an empirical transition distribution.  Search: P-UCT walks the frozen
tree, draws one cached outcome at the reached edge, and backs the discounted
value up the visited path with incremental averages.

Every sampling site derives its generator from (seed, structured key), so
construction order and batching cannot change the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .prior import PriorModel, sample_stacks
from .rqvae import (
    CodeStack,
    DecodedFields,
    RqVaeModel,
    encode_history_to_codes,
    stack_latent,
)
from . import diffmath as dm

__all__ = [
    "PlannerConfig",
    "DecisionNode",
    "ActionEdge",
    "OutcomeSample",
    "LatentSearchTree",
    "build_latent_tree",
    "score_candidate",
    "puct_select",
    "backup",
    "simulate_once",
    "select_action",
    "plan_step",
    "dump_tree",
]

# rng site tags
_COARSE, _COMPLETE, _ROOT_LOOK, _PROPOSE, _LEVEL_LOOK, _SIM = range(6)


@dataclass
class PlannerConfig:
    coarse_samples: int = 16  # first-depth draws at the root
    completions: int = 1  # residual completions per coarse draw
    lookahead: int = 4  # sampled successors per candidate
    proposals: int = 4  # stacks proposed per interior node
    horizon: int = 2  # tree depth in macro tokens; 0 = prior-only
    keep_frac: float = 0.5
    temperatures: Sequence[float] = (2.0,)  # per depth, broadcast if shorter
    top_ks: Sequence[int] = (0,)  # per depth; 0 means full support
    c1: float = 1.25
    c2: float = 19652.0
    prior_temperature: float = 2.0
    iterations: int = 100
    root_cap: int = 0  # per-node candidate cap for selection; 0 = all edges
    gamma: float = 0.99
    macro_len: int = 3

    def __post_init__(self):
        for name in ("coarse_samples", "completions", "lookahead", "proposals", "iterations", "macro_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not (0 < self.keep_frac <= 1):
            raise ValueError("keep_frac must be in (0, 1]")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be > 0")

    def per_depth(self, depth: int, codebook_size: int):
        xs = list(self.temperatures)
        ks = list(self.top_ks)
        xi = [float(xs[i]) if i < len(xs) else float(xs[-1]) for i in range(depth)]
        rho = [int(ks[i]) if i < len(ks) else int(ks[-1]) for i in range(depth)]
        rho = [codebook_size if r == 0 else r for r in rho]
        return xi, rho


@dataclass
class OutcomeSample:
    """One cached successor draw: its stack and the decoded tail fields."""

    next_stack: CodeStack
    rtg: float
    macro_return: float
    observation: np.ndarray
    macro_action: np.ndarray


@dataclass
class ActionEdge:
    stack: CodeStack
    prior_logit: float
    macro_return: float  # decoded immediate macro return of taking this edge
    outcomes: list = field(default_factory=list)
    child: "DecisionNode | None" = None
    score: float = 0.0  # construction-time lookahead score
    visit_count: int = 0
    q_value: float = 0.0


@dataclass
class DecisionNode:
    observation: np.ndarray
    context_codes: list  # CodeStacks of the real history
    depth: int
    visit_count: int = 0
    edges: list = field(default_factory=list)


@dataclass
class LatentSearchTree:
    root: DecisionNode
    config: PlannerConfig
    seed: int


def _site_rng(seed: int, key: tuple) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def score_candidate(macro_return: float, tail_rtgs: Sequence[float]) -> float:
    """Mean over sampled successors of immediate macro return plus tail long return."""
    tail_rtgs = np.asarray(tail_rtgs, dtype=np.float64)
    if tail_rtgs.size < 1:
        raise ValueError("need at least one lookahead sample")
    return float(macro_return + tail_rtgs.mean())


def _decode_tail(
    model: RqVaeModel,
    ctx_latents: np.ndarray,
    cur_z: np.ndarray,
    next_z: np.ndarray | None,
    anchors: np.ndarray,
) -> DecodedFields:
    """Decode the last position of [pads, context, current(, next)] sequences.

    Sequences are left-padded with zero latents so the current stack always
    sits at the same absolute slot as in training.
    """
    c = model.context_len
    n = ctx_latents.shape[0]
    u = cur_z.shape[0]
    t = c + 1 + (0 if next_z is None else 1)
    seq = np.zeros((u, t, model.d_latent), dtype=np.float32)
    if n:
        seq[:, c - n : c] = ctx_latents
    seq[:, c] = cur_z
    if next_z is not None:
        seq[:, c + 1] = next_z
    anchors = np.asarray(anchors, dtype=np.float32)
    if anchors.ndim == 1:
        anchors = np.broadcast_to(anchors, (u, anchors.shape[0]))
    rtg, mret, obs, act = model.decode_latents(dm.tensor(seq), anchors)
    return model.unstandardize(
        rtg.values[:, -1, 0], mret.values[:, -1, 0], obs.values[:, -1], act.values[:, -1]
    )


def _log_softmax(u: np.ndarray) -> np.ndarray:
    z = u - u.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _sample_root_candidates(prior, ctx_arr, obs, depth, xi, rho, cfg, seed):
    """M coarse first-depth draws, each completed J times to a full stack.

    Returns unique stacks (canonically ordered) with their model log-probs.
    """
    from .prior import top_k_temperature_categorical

    h_root = prior.trunk_batch(ctx_arr, np.asarray(obs)[None]).values[0]
    u1 = prior.head_batch(
        dm.Tensor(h_root[None]),
        1,
        dm.Tensor(np.zeros((1, prior.d_latent), dtype=np.float32)),
    ).values[0]
    logsm1 = _log_softmax(u1.astype(np.float64))
    m, j = cfg.coarse_samples, cfg.completions
    coarse = [
        top_k_temperature_categorical(u1, xi[0], rho[0], _site_rng(seed, (_COARSE, i)))
        for i in range(m)
    ]
    rows = np.zeros((m * j, depth), dtype=np.int64)
    logps = np.zeros(m * j)
    for i, k1 in enumerate(coarse):
        rows[i * j : (i + 1) * j, 0] = k1
        logps[i * j : (i + 1) * j] = logsm1[k1]
    if depth > 1:
        partial = prior.store["code_emb"].values[rows[:, 0]].copy()
        h_tile = dm.Tensor(np.broadcast_to(h_root, (m * j, h_root.shape[0])).copy())
        for lvl in range(2, depth + 1):
            logits = prior.head_batch(h_tile, lvl, dm.Tensor(partial)).values
            logsm = _log_softmax(logits.astype(np.float64))
            for i in range(m):
                for jj in range(j):
                    r = i * j + jj
                    k = top_k_temperature_categorical(
                        logits[r], xi[lvl - 1], rho[lvl - 1], _site_rng(seed, (_COMPLETE, i, jj, lvl))
                    )
                    rows[r, lvl - 1] = k
                    logps[r] += logsm[r, k]
            partial = partial + prior.store["code_emb"].values[rows[:, lvl - 1]]
    uniq = {}
    for r in range(m * j):
        key = tuple(rows[r])
        if key not in uniq:
            uniq[key] = logps[r]
    stacks = sorted(uniq)  # canonical order: by stack tuple
    return [CodeStack(s) for s in stacks], np.array([uniq[s] for s in stacks])


def _score_level(
    rqvae_model,
    prior,
    ctx_arr,
    ctx_lat,
    candidates,
    anchors,
    look_key_prefixes,
    depth,
    xi,
    rho,
    cfg,
    seed,
):
    """Lookahead-score a flat list of candidate stacks (possibly several nodes').

    ``ctx_arr`` is the shared encoded history (1, n, D); each candidate's
    prior context for successor sampling is history + its own stack.  Returns
    per-candidate scores, mean successor observations, the decoded immediate
    macro returns, and the cached outcome lists.
    """
    u = len(candidates)
    nl = cfg.lookahead
    cand_arr = np.array([list(s.indices) for s in candidates], dtype=np.int64)
    cur_z = np.stack([stack_latent(rqvae_model.codebook, s) for s in candidates])
    anchors = np.asarray(anchors, dtype=np.float32)
    if anchors.ndim == 1:
        anchors = np.broadcast_to(anchors, (u, anchors.shape[0])).copy()

    dec_cur = _decode_tail(rqvae_model, ctx_lat, cur_z, None, anchors)
    g_mac = dec_cur.macro_return  # (U,)

    n = ctx_arr.shape[1]
    look_ctx = np.zeros((u * nl, n + 1, depth), dtype=np.int64)
    if n:
        look_ctx[:, :n] = np.repeat(ctx_arr, u * nl, axis=0)
    look_ctx[:, n] = np.repeat(cand_arr, nl, axis=0)
    look_obs = np.repeat(anchors, nl, axis=0)
    rngs = [
        _site_rng(seed, look_key_prefixes[r // nl] + tuple(cand_arr[r // nl]) + (r % nl,))
        for r in range(u * nl)
    ]
    next_stacks, _ = sample_stacks(prior, look_ctx, look_obs, depth, xi, rho, rngs)
    next_z = np.stack([stack_latent(rqvae_model.codebook, s) for s in next_stacks])
    tails = _decode_tail(
        rqvae_model, ctx_lat, np.repeat(cur_z, nl, axis=0), next_z, look_obs
    )

    scores = np.zeros(u)
    child_obs = np.zeros((u, rqvae_model.obs_dim), dtype=np.float32)
    outcome_lists = []
    for i in range(u):
        sl = slice(i * nl, (i + 1) * nl)
        scores[i] = score_candidate(float(g_mac[i]), tails.rtg[sl])
        child_obs[i] = tails.observation[sl].mean(axis=0)
        outcome_lists.append(
            [
                OutcomeSample(
                    next_stack=next_stacks[i * nl + k],
                    rtg=float(tails.rtg[i * nl + k]),
                    macro_return=float(tails.macro_return[i * nl + k]),
                    observation=tails.observation[i * nl + k].copy(),
                    macro_action=tails.macro_action[i * nl + k].copy(),
                )
                for k in range(nl)
            ]
        )
    return scores, child_obs, g_mac, outcome_lists


def _keep_top(count: int, frac: float) -> int:
    return max(1, math.ceil(frac * count))


def build_latent_tree(
    rqvae_model: RqVaeModel,
    prior: PriorModel,
    obs: np.ndarray,
    history: Sequence,
    config: PlannerConfig,
    seed: int,
) -> LatentSearchTree:
    """Pre-construct the cached search tree for one decision.

    Level 1 keeps the best ceil(keep_frac * M * J) of the root candidates;
    each deeper level keeps ceil(keep_frac * B) of each frontier node's
    proposals.  With horizon 0 the candidates are kept unscored (prior-only
    action selection).
    """
    depth = rqvae_model.depth
    xi, rho = config.per_depth(depth, prior.codebook_size)
    ctx_stacks = encode_history_to_codes(rqvae_model, history)
    ctx_arr = (
        np.array([list(s.indices) for s in ctx_stacks], dtype=np.int64)[None]
        if ctx_stacks
        else np.zeros((1, 0, depth), dtype=np.int64)
    )
    ctx_lat = (
        np.stack([stack_latent(rqvae_model.codebook, s) for s in ctx_stacks])
        if ctx_stacks
        else np.zeros((0, rqvae_model.d_latent), dtype=np.float32)
    )
    obs = np.asarray(obs, dtype=np.float32)
    root = DecisionNode(observation=obs, context_codes=list(ctx_stacks), depth=0)
    tree = LatentSearchTree(root=root, config=config, seed=seed)

    stacks, logps = _sample_root_candidates(prior, ctx_arr, obs, depth, xi, rho, config, seed)

    if config.horizon == 0:
        for s, lp in zip(stacks, logps):
            root.edges.append(
                ActionEdge(stack=s, prior_logit=float(lp), macro_return=0.0)
            )
        return tree

    prefixes = [(_ROOT_LOOK,)] * len(stacks)
    scores, child_obs, g_mac, outcomes = _score_level(
        rqvae_model, prior, ctx_arr, ctx_lat, stacks, obs, prefixes, depth, xi, rho, config, seed
    )
    keep = min(_keep_top(config.coarse_samples * config.completions, config.keep_frac), len(stacks))
    order = np.lexsort((np.arange(len(stacks)), -scores))[:keep]
    for rank, i in enumerate(order):
        child = DecisionNode(observation=child_obs[i], context_codes=list(ctx_stacks), depth=1)
        root.edges.append(
            ActionEdge(
                stack=stacks[i],
                prior_logit=float(logps[i]),
                macro_return=float(g_mac[i]),
                outcomes=outcomes[i],
                child=child,
                score=float(scores[i]),
            )
        )

    frontier = [(edge.child, edge.stack, (idx,)) for idx, edge in enumerate(root.edges)]
    for level in range(2, config.horizon + 1):
        if not frontier:
            break
        next_frontier = []
        # propose B stacks per frontier node, batched across the whole level
        n = ctx_arr.shape[1]
        f = len(frontier)
        b = config.proposals
        prop_ctx = np.zeros((f * b, n + 1, depth), dtype=np.int64)
        prop_obs = np.zeros((f * b, rqvae_model.obs_dim), dtype=np.float32)
        rngs = []
        for fi, (node, in_stack, path) in enumerate(frontier):
            sl = slice(fi * b, (fi + 1) * b)
            if n:
                prop_ctx[sl, :n] = ctx_arr[0]
            prop_ctx[sl, n] = list(in_stack.indices)
            prop_obs[sl] = node.observation
            rngs.extend(_site_rng(seed, (_PROPOSE,) + path + (k,)) for k in range(b))
        prop_stacks, prop_lps = sample_stacks(prior, prop_ctx, prop_obs, depth, xi, rho, rngs)

        # dedup per node, then score the whole level in one batch
        flat_cands, flat_lps, flat_anchor, flat_prefix, owners = [], [], [], [], []
        for fi, (node, in_stack, path) in enumerate(frontier):
            seen = {}
            for k in range(b):
                s = prop_stacks[fi * b + k]
                if s.indices not in seen:
                    seen[s.indices] = prop_lps[fi * b + k]
            for key in sorted(seen):
                flat_cands.append(CodeStack(key))
                flat_lps.append(seen[key])
                flat_anchor.append(frontier[fi][0].observation)
                flat_prefix.append((_LEVEL_LOOK,) + path)
                owners.append(fi)
        scores, child_obs, g_mac, outcomes = _score_level(
            rqvae_model,
            prior,
            ctx_arr,
            ctx_lat,
            flat_cands,
            np.stack(flat_anchor),
            flat_prefix,
            depth,
            xi,
            rho,
            config,
            seed,
        )
        owners = np.array(owners)
        for fi, (node, in_stack, path) in enumerate(frontier):
            mine = np.flatnonzero(owners == fi)
            if mine.size == 0:
                continue
            keep = min(_keep_top(config.proposals, config.keep_frac), mine.size)
            order = mine[np.lexsort((mine, -scores[mine]))][:keep]
            for i in order:
                child = DecisionNode(
                    observation=child_obs[i], context_codes=list(ctx_stacks), depth=level
                )
                edge = ActionEdge(
                    stack=flat_cands[i],
                    prior_logit=float(flat_lps[i]),
                    macro_return=float(g_mac[i]),
                    outcomes=outcomes[i],
                    child=child,
                    score=float(scores[i]),
                )
                node.edges.append(edge)
                next_frontier.append((child, edge.stack, path + (len(node.edges) - 1,)))
        frontier = next_frontier
    return tree


def puct_select(node: DecisionNode, config: PlannerConfig) -> ActionEdge:
    """Highest combined value-plus-exploration edge among the node's candidates.

    The prior term is a temperature-scaled softmax over the edge logits of the
    top root_cap edges (all edges when the cap is 0); adding a constant to all
    logits cannot change the outcome.  Ties break toward the larger prior,
    then the lower edge index.
    """
    if not node.edges:
        raise ValueError("cannot select from a node with no edges")
    logits = np.array([e.prior_logit for e in node.edges])
    cap = config.root_cap if config.root_cap > 0 else len(node.edges)
    cap = min(cap, len(node.edges))
    eligible = np.lexsort((np.arange(len(logits)), -logits))[:cap]
    el_logits = logits[eligible] / config.prior_temperature
    el_logits -= el_logits.max()
    pi = np.exp(el_logits)
    pi /= pi.sum()
    coeff = config.c1 + np.log((node.visit_count + config.c2 + 1) / config.c2)
    root_n = np.sqrt(node.visit_count)
    q = np.array([node.edges[i].q_value for i in eligible])
    n_e = np.array([node.edges[i].visit_count for i in eligible])
    scores = q + coeff * root_n / (1.0 + n_e) * pi
    best = np.lexsort((eligible, -pi, -scores))[0]
    return node.edges[eligible[best]]


def backup(path, leaf_value: float, gamma: float, macro_len: int) -> None:
    """Propagate a leaf value to the root with incremental-average updates.

    The value backed into an edge is the discounted sum of the decoded macro
    returns of the edges strictly below it plus the discounted leaf value;
    each macro step discounts by gamma**macro_len.
    """
    if not path:
        raise ValueError("backup needs a non-empty path")
    g_macro = gamma**macro_len
    v = float(leaf_value)
    for i in range(len(path) - 1, -1, -1):
        node, edge = path[i]
        edge.q_value += (v - edge.q_value) / (edge.visit_count + 1)
        edge.visit_count += 1
        node.visit_count += 1
        if i > 0:
            v = edge.macro_return + g_macro * v


def simulate_once(tree: LatentSearchTree, config: PlannerConfig, rng: np.random.Generator) -> None:
    """One search iteration: walk down by P-UCT until an unvisited edge or the
    frontier, draw one cached outcome there, and back its long return up."""
    node = tree.root
    path = []
    while True:
        edge = puct_select(node, config)
        path.append((node, edge))
        if edge.visit_count == 0 or edge.child is None or not edge.child.edges:
            break
        node = edge.child
    if not edge.outcomes:
        raise ValueError("reached an edge with no cached outcomes (horizon-0 tree?)")
    outcome = edge.outcomes[int(rng.integers(0, len(edge.outcomes)))]
    backup(path, outcome.rtg, config.gamma, config.macro_len)


def _decode_macro(tree: LatentSearchTree, rqvae_model: RqVaeModel, edge: ActionEdge) -> np.ndarray:
    ctx_lat = (
        np.stack([stack_latent(rqvae_model.codebook, s) for s in tree.root.context_codes])
        if tree.root.context_codes
        else np.zeros((0, rqvae_model.d_latent), dtype=np.float32)
    )
    cur_z = stack_latent(rqvae_model.codebook, edge.stack)[None]
    fields = _decode_tail(rqvae_model, ctx_lat, cur_z, None, tree.root.observation)
    return np.clip(fields.macro_action[0], -1.0, 1.0)


def select_action(tree: LatentSearchTree, rqvae_model: RqVaeModel):
    """Most-visited root edge (ties: higher value, then lower index), decoded
    to an executable macro-action clamped to the action bounds."""
    edges = tree.root.edges
    if not edges:
        raise ValueError("tree has no root edges")
    n = np.array([e.visit_count for e in edges])
    q = np.array([e.q_value for e in edges])
    best = int(np.lexsort((np.arange(len(edges)), -q, -n))[0])
    edge = edges[best]
    return edge.stack, _decode_macro(tree, rqvae_model, edge)


def _select_by_prior(tree: LatentSearchTree, rqvae_model: RqVaeModel):
    edges = tree.root.edges
    logits = np.array([e.prior_logit for e in edges])
    best = int(np.lexsort((np.arange(len(edges)), -logits))[0])
    edge = edges[best]
    return edge.stack, _decode_macro(tree, rqvae_model, edge)


def plan_step(
    rqvae_model: RqVaeModel,
    prior: PriorModel,
    obs: np.ndarray,
    history: Sequence,
    config: PlannerConfig,
    seed: int,
):
    """Full decision: build the tree, search it, decode the chosen stack.

    With horizon 0 the search is skipped and the highest-prior candidate is
    decoded directly.  Returns (macro_action (L, act_dim), tree).
    """
    tree = build_latent_tree(rqvae_model, prior, obs, history, config, seed)
    if config.horizon == 0:
        stack, macro = _select_by_prior(tree, rqvae_model)
        return macro, tree
    sim_rng = _site_rng(seed, (_SIM,))
    for _ in range(config.iterations):
        simulate_once(tree, config, sim_rng)
    stack, macro = select_action(tree, rqvae_model)
    return macro, tree


def dump_tree(tree: LatentSearchTree) -> str:
    """One text record per node/edge for debugging and trace comparison."""
    lines = []

    def fmt_obs(o):
        return ",".join(f"{x:.4f}" for x in np.asarray(o).ravel())

    def walk(node, path):
        p = ".".join(str(i) for i in path) or "root"
        lines.append(f"node path={p} depth={node.depth} N={node.visit_count} obs={fmt_obs(node.observation)}")
        for i, e in enumerate(node.edges):
            stack = ":".join(str(k) for k in e.stack.indices)
            lines.append(
                f"edge path={p} idx={i} stack={stack} logit={e.prior_logit:.6f} "
                f"score={e.score:.6f} gmac={e.macro_return:.6f} Q={e.q_value:.6f} N={e.visit_count}"
            )
            if e.child is not None:
                walk(e.child, path + (i,))

    walk(tree.root, ())
    return "\n".join(lines) + "\n"
