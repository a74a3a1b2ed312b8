"""Flat key = value run configuration with a typed schema.

The format is plain text, one assignment per line, '#' comments allowed.
Unknown keys are rejected so typos fail loudly, and the resolved config is
embedded verbatim in checkpoints and reports for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

__all__ = ["RunConfig", "ConfigError", "parse_config", "config_to_text", "parse_config_text"]


class ConfigError(ValueError):
    pass


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    v = str(v).strip()
    return tuple(float(x) for x in v.split(",") if x.strip() != "")


def _ints(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    v = str(v).strip()
    return tuple(int(x) for x in v.split(",") if x.strip() != "")


def _str_list(v):
    if isinstance(v, (list, tuple)):
        return tuple(str(x) for x in v)
    return tuple(x.strip() for x in str(v).split(",") if x.strip() != "")


@dataclass
class RunConfig:
    # environment / data
    env: str = "pointmass"
    episode_steps: int = 60
    f_scale: float = 8.0
    train_regimes: tuple = (0.0, 2.5, 5.0)
    eval_regimes: tuple = (0.0, 2.5, 5.0)
    tiers: tuple = ("expert", "medium")
    episodes_per_cell: int = 25
    obs_mask: tuple = ()
    gamma: float = 0.99
    macro_len: int = 3
    obs_dim: int = 0  # 0 = derived from the environment / dataset
    act_dim: int = 0

    # model dimensions
    context_len: int = 6
    d_latent: int = 16
    codebook_size: int = 32
    depth: int = 2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    depth_emb_dim: int = 16
    head_hidden: int = 128

    # training
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 64
    rqvae_steps: int = 3000
    prior_steps: int = 3000
    alpha_tail: float = 1.0
    alpha_ctx: float = 0.1
    beta_ps: float = 1.0
    ema_decay: float = 0.99
    dead_code_batches: int = 100
    dropout: float = 0.0
    cold_start_frac: float = 0.25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # planner
    coarse_samples: int = 16
    completions: int = 1
    lookahead: int = 4
    proposals: int = 4
    horizon: int = 2
    keep_frac: float = 0.5
    xi: tuple = (2.0,)
    rho: tuple = (0,)
    c1: float = 1.25
    c2: float = 19652.0
    prior_temperature: float = 2.0
    iterations: int = 100
    root_cap: int = 0
    plan_mode: str = "macro"  # macro | primitive

    # evaluation / benchmarking
    eval_seeds: int = 5
    eval_episodes: int = 20
    regime_switch_step: int = 0  # 0 = fixed regime per episode
    bench_warmup: int = 5
    bench_measure: int = 30

    def validate(self):
        if self.env not in ("pointmass", "pushchain"):
            raise ConfigError(f"unknown env: {self.env}")
        if self.plan_mode not in ("macro", "primitive"):
            raise ConfigError(f"unknown plan_mode: {self.plan_mode}")
        if self.macro_len < 1 or self.context_len < 0:
            raise ConfigError("macro_len must be >= 1 and context_len >= 0")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not (0 < self.keep_frac <= 1):
            raise ConfigError("keep_frac must be in (0, 1]")
        return self


_CONVERTERS = {
    "train_regimes": _floats,
    "eval_regimes": _floats,
    "tiers": _str_list,
    "obs_mask": _ints,
    "xi": _floats,
    "rho": _ints,
}


def _field_types():
    out = {}
    for f in fields(RunConfig):
        if f.name in _CONVERTERS:
            out[f.name] = _CONVERTERS[f.name]
        elif f.type in ("int", int):
            out[f.name] = int
        elif f.type in ("float", float):
            out[f.name] = float
        else:
            out[f.name] = str
    return out


_TYPES = _field_types()


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            updates[key] = _TYPES[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    return replace(cfg, **updates).validate()


def parse_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base=base)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
