"""Policy evaluation with ablation overrides, and decision-latency benchmarking.

Evaluation runs the planner in a closed loop against the environment while
maintaining the sliding macro-step context window; adaptation happens purely
through that window (no gradient updates).  Every episode is reproducible
from (seed, regime index, episode index).
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from ..core import ContextWindow, compute_macro_return, slide_context
from ..envs import BehaviorPolicy, LatentRegime, PomdpMask, make_env, scripted_behavior_action
from ..planner import PlannerConfig, plan_step
from ..prior import PriorModel
from ..rqvae import RqVaeModel
from .config import RunConfig, config_to_text

__all__ = ["MetricsReport", "evaluate_policy", "bench_latency", "planner_config_from"]


@dataclass
class MetricsReport:
    """Episode returns keyed by (seed, regime), plus optional latency rows."""

    config_text: str
    returns: dict = field(default_factory=dict)  # (seed, regime) -> list[float]
    latency_rows: list = field(default_factory=list)  # (context, horizon, candidates, mean, p95, n)

    def add(self, seed: int, regime: float, value: float):
        self.returns.setdefault((seed, regime), []).append(value)

    def all_returns(self) -> np.ndarray:
        vals = [v for lst in self.returns.values() for v in lst]
        return np.array(vals, dtype=np.float64)

    def mean(self) -> float:
        return float(self.all_returns().mean())

    def stderr(self) -> float:
        vals = self.all_returns()
        if vals.size < 2:
            raise ValueError("standard error needs at least 2 episode returns")
        return float(vals.std(ddof=1) / np.sqrt(vals.size))

    def seed_means(self) -> dict:
        by_seed = {}
        for (seed, _), lst in sorted(self.returns.items()):
            by_seed.setdefault(seed, []).extend(lst)
        return {s: float(np.mean(v)) for s, v in by_seed.items()}

    def regime_means(self) -> dict:
        by_regime = {}
        for (_, regime), lst in sorted(self.returns.items()):
            by_regime.setdefault(regime, []).extend(lst)
        out = {}
        for r, v in by_regime.items():
            arr = np.array(v)
            se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
            out[r] = (float(arr.mean()), se)
        return out

    def to_text(self) -> str:
        lines = ["== evaluation report ==", ""]
        if self.returns:
            se = f"{self.stderr():.6f}" if self.all_returns().size > 1 else "n/a"
            lines.append(f"pooled mean return: {self.mean():.6f} +/- {se} (stderr)")
            lines.append("")
            lines.append("per-regime breakdown:")
            for r, (m, se) in sorted(self.regime_means().items()):
                lines.append(f"  regime {r:g}: {m:.6f} +/- {se:.6f}")
            lines.append("")
            lines.append("per-seed means:")
            for s, m in sorted(self.seed_means().items()):
                lines.append(f"  seed {s}: {m:.6f}")
            lines.append("")
        if self.latency_rows:
            lines.append("latency (seconds per decision):")
            lines.append(f"  {'context':>7} {'horizon':>7} {'cands':>6} {'mean':>10} {'p95':>10} {'n':>4}")
            for c, h, k, m, p, n in self.latency_rows:
                lines.append(f"  {c:>7} {h:>7} {k:>6} {m:>10.5f} {p:>10.5f} {n:>4}")
            lines.append("")
        lines.append("== resolved config ==")
        lines.append(self.config_text.rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["seed,regime,episode,return"]
        for (seed, regime), lst in sorted(self.returns.items()):
            for i, v in enumerate(lst):
                rows.append(f"{seed},{regime:g},{i},{v:.6f}")
        return "\n".join(rows) + "\n"

    def latency_csv(self) -> str:
        rows = ["context,horizon,candidates,mean_s,p95_s,n"]
        for c, h, k, m, p, n in self.latency_rows:
            rows.append(f"{c},{h},{k},{m:.6f},{p:.6f},{n}")
        return "\n".join(rows) + "\n"


def planner_config_from(cfg: RunConfig, **overrides) -> PlannerConfig:
    kw = dict(
        coarse_samples=cfg.coarse_samples,
        completions=cfg.completions,
        lookahead=cfg.lookahead,
        proposals=cfg.proposals,
        horizon=cfg.horizon,
        keep_frac=cfg.keep_frac,
        temperatures=cfg.xi,
        top_ks=cfg.rho,
        c1=cfg.c1,
        c2=cfg.c2,
        prior_temperature=cfg.prior_temperature,
        iterations=cfg.iterations,
        root_cap=cfg.root_cap,
        gamma=cfg.gamma,
        macro_len=cfg.macro_len,
    )
    kw.update(overrides)
    return PlannerConfig(**kw)


def _with_depth(rq: RqVaeModel, pr: PriorModel, depth: int):
    if depth == rq.depth:
        return rq, pr
    if depth > rq.depth:
        raise ValueError(f"depth override {depth} exceeds trained depth {rq.depth}")
    rq2, pr2 = copy.copy(rq), copy.copy(pr)
    rq2.depth = depth
    pr2.depth = depth
    return rq2, pr2


def _plan_seed(seed: int, ri: int, ep: int, step: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(100 + ri, ep, step))
    return int(ss.generate_state(1)[0])


def run_episode(
    env,
    rq: RqVaeModel,
    pr: PriorModel,
    pcfg: PlannerConfig,
    capacity: int,
    gamma: float,
    env_seed: int,
    plan_seed_fn,
    plan_mode: str = "macro",
    switch_step: int = 0,
    switch_regime: float | None = None,
) -> float:
    obs = env.reset(seed=env_seed)
    window = ContextWindow(capacity=capacity)
    total = 0.0
    step = 0
    macro_len = pcfg.macro_len
    prim_buffer = []  # primitive-mode trail of (obs, action, reward)

    def history():
        if plan_mode == "macro":
            return [(e[0], e[1], e[2]) for e in window.entries]
        n_blocks = min(capacity, len(prim_buffer) // macro_len)
        if n_blocks == 0:
            return []
        tail = prim_buffer[-n_blocks * macro_len :]
        out = []
        for b in range(n_blocks):
            blk = tail[b * macro_len : (b + 1) * macro_len]
            g = compute_macro_return([x[2] for x in blk], gamma)
            out.append((g, blk[0][0], np.stack([x[1] for x in blk])))
        return out

    while not env.done:
        macro, _ = plan_step(rq, pr, obs, history(), pcfg, plan_seed_fn(step))
        if plan_mode == "macro":
            boundary_obs = obs
            rewards, acts = [], []
            for a in macro:
                nxt, r, done = env.step(a)
                total += r
                rewards.append(r)
                acts.append(np.clip(a, -1.0, 1.0))
                obs = nxt
                step += 1
                if switch_step and step == switch_step and switch_regime is not None:
                    env.regime = LatentRegime(switch_regime)
                if done:
                    break
            if len(rewards) == macro_len:
                g = compute_macro_return(rewards, gamma)
                window = slide_context(window, (g, boundary_obs, np.stack(acts)))
        else:
            a = macro[0]
            nxt, r, done = env.step(a)
            prim_buffer.append((obs, np.clip(a, -1.0, 1.0), r))
            total += r
            obs = nxt
            step += 1
            if switch_step and step == switch_step and switch_regime is not None:
                env.regime = LatentRegime(switch_regime)
    return total


def evaluate_policy(
    cfg: RunConfig,
    rq: RqVaeModel,
    pr: PriorModel,
    regimes,
    seeds,
    episodes: int,
    horizon: int | None = None,
    context: int | None = None,
    iterations: int | None = None,
    depth: int | None = None,
    log=None,
) -> MetricsReport:
    """Closed-loop returns per (seed, regime); all adaptation is in-context.

    ``horizon``, ``context``, ``iterations`` and ``depth`` override the config
    for ablations; context must not exceed the trained window and depth must
    not exceed the trained stack depth.
    """
    if depth is not None:
        rq, pr = _with_depth(rq, pr, depth)
    capacity = cfg.context_len if context is None else context
    if capacity > rq.context_len:
        raise ValueError(f"context override {capacity} exceeds trained window {rq.context_len}")
    overrides = {}
    if horizon is not None:
        overrides["horizon"] = horizon
    if iterations is not None:
        overrides["iterations"] = iterations
    pcfg = planner_config_from(cfg, **overrides)
    report = MetricsReport(config_text=config_to_text(cfg))
    regimes = list(regimes)
    for seed in seeds:
        for ri, regime in enumerate(regimes):
            for ep in range(episodes):
                env_seed = int(
                    np.random.SeedSequence(seed, spawn_key=(ri, ep)).generate_state(1)[0]
                )
                switch_regime = None
                if cfg.regime_switch_step > 0:
                    # switch into one of the other training regimes mid-episode
                    pool = [r for r in cfg.train_regimes if r != regime] or [regime]
                    pick = np.random.default_rng(
                        np.random.SeedSequence(seed, spawn_key=(ri, ep, 7))
                    ).integers(0, len(pool))
                    switch_regime = float(pool[int(pick)])
                env = make_env(
                    cfg.env,
                    LatentRegime(float(regime)),
                    mask=PomdpMask(frozenset(cfg.obs_mask)),
                    max_steps=cfg.episode_steps,
                    f_scale=cfg.f_scale,
                )
                ret = run_episode(
                    env,
                    rq,
                    pr,
                    pcfg,
                    capacity,
                    cfg.gamma,
                    env_seed,
                    lambda step, seed=seed, ri=ri, ep=ep: _plan_seed(seed, ri, ep, step),
                    plan_mode=cfg.plan_mode,
                    switch_step=cfg.regime_switch_step,
                    switch_regime=switch_regime,
                )
                report.add(seed, float(regime), ret)
            if log:
                m = np.mean(report.returns[(seed, float(regime))])
                log(f"eval seed={seed} regime={regime:g}: mean={m:.4f}")
    return report


def _bench_state(cfg: RunConfig, context: int):
    """Roll the scripted expert until the window holds ``context`` macro steps."""
    env = make_env(
        cfg.env,
        LatentRegime(float(cfg.train_regimes[0])),
        max_steps=max(cfg.episode_steps, (context + 2) * cfg.macro_len),
        f_scale=cfg.f_scale,
    )
    obs = env.reset(seed=1234)
    window = ContextWindow(capacity=max(context, 1))
    policy = BehaviorPolicy.tier("expert")
    rng = np.random.default_rng(1234)
    for _ in range(context):
        boundary = obs
        rewards, acts = [], []
        for _ in range(cfg.macro_len):
            a = scripted_behavior_action(policy, obs, rng)
            obs, r, _ = env.step(a)
            rewards.append(r)
            acts.append(np.clip(a, -1.0, 1.0))
        window = slide_context(
            window, (compute_macro_return(rewards, cfg.gamma), boundary, np.stack(acts))
        )
    return obs, [(e[0], e[1], e[2]) for e in window.entries]


def bench_latency(
    cfg: RunConfig,
    rq: RqVaeModel,
    pr: PriorModel,
    contexts,
    horizons,
    candidates,
    log=None,
) -> MetricsReport:
    """Wall-clock per-decision time across (context, horizon, candidates) cells.

    Each cell gets ``bench_warmup`` untimed calls and ``bench_measure`` timed
    ones.  The timed calls are interleaved across cells in round-robin passes
    so slow clock or thermal drift cannot masquerade as a between-cell
    difference, and the collector is paused while timing.
    """
    import gc

    report = MetricsReport(config_text=config_to_text(cfg))
    for c in contexts:
        if c > rq.context_len:
            raise ValueError(f"bench context {c} exceeds model window {rq.context_len}")
    cells = []
    for c in contexts:
        for h in horizons:
            for cand in candidates:
                pcfg = planner_config_from(cfg, horizon=int(h), coarse_samples=int(cand))
                obs, history = _bench_state(cfg, int(c))
                cells.append({"key": (int(c), int(h), int(cand)), "pcfg": pcfg,
                              "obs": obs, "history": history, "samples": []})
    for cell in cells:
        for i in range(cfg.bench_warmup):
            plan_step(rq, pr, cell["obs"], cell["history"], cell["pcfg"], 9000 + i)
    passes = min(5, cfg.bench_measure)
    counts = [cfg.bench_measure // passes + (1 if p < cfg.bench_measure % passes else 0)
              for p in range(passes)]
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        i = 0
        for n in counts:
            for cell in cells:
                for _ in range(n):
                    t0 = time.perf_counter()
                    plan_step(rq, pr, cell["obs"], cell["history"], cell["pcfg"], 9100 + i)
                    cell["samples"].append(time.perf_counter() - t0)
                    i += 1
    finally:
        if gc_was_enabled:
            gc.enable()
    for cell in cells:
        arr = np.array(cell["samples"])
        row = (*cell["key"], float(arr.mean()), float(np.percentile(arr, 95)), len(arr))
        report.latency_rows.append(row)
        if log:
            log(f"bench C={row[0]} H={row[1]} cand={row[2]}: mean={row[3]*1e3:.2f} ms")
    return report
