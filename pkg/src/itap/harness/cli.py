"""Command-line interface.

Subcommands: gen-data, train-rqvae, train-prior, eval, bench-latency,
inspect.  The default seed comes from --seed, then the ITAP_SEED environment
variable, then the config.  Exit codes: 0 success, 1 usage error, 2
data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from ..envs import generate_offline_dataset
from .config import ConfigError, RunConfig, config_to_text, parse_config
from .dataio import (
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    DataFormatError,
    read_checkpoint,
    read_dataset,
    write_dataset,
)
from .evaluate import bench_latency, evaluate_policy
from .training import NumericalDivergenceError, load_models, save_models, train_prior, train_rqvae

__all__ = ["cli_dispatch", "main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _build_parser() -> _Parser:
    p = _Parser(prog="itap", description="offline latent temporal-abstraction planning toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="path to a key = value config file")
        sp.add_argument("--seed", type=int, help="master seed (beats ITAP_SEED)")

    g = sub.add_parser("gen-data", help="roll out scripted policies into a dataset file")
    common(g)
    g.add_argument("--out", required=True, help="output dataset path")
    g.add_argument("--regimes", help="comma-separated perturbation ceilings")
    g.add_argument("--tiers", help="comma-separated policy tiers")
    g.add_argument("--episodes", type=int, help="episodes per (regime, tier) cell")

    t = sub.add_parser("train-rqvae", help="train the trajectory tokenizer")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--depth", type=int, help="residual stack depth")
    t.add_argument("--codebook", type=int, help="codebook size")
    t.add_argument("--macro-len", type=int)
    t.add_argument("--context", type=int)

    q = sub.add_parser("train-prior", help="train the code-stack prior on a frozen tokenizer")
    common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--rqvae", required=True, help="checkpoint from train-rqvae")
    q.add_argument("--out", required=True)
    q.add_argument("--steps", type=int)

    e = sub.add_parser("eval", help="closed-loop policy evaluation")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", help="report path (default: stdout)")
    e.add_argument("--regimes")
    e.add_argument("--seeds", type=int, help="number of evaluation seeds")
    e.add_argument("--episodes", type=int)
    e.add_argument("--horizon", type=int)
    e.add_argument("--context", type=int)
    e.add_argument("--iterations", type=int)
    e.add_argument("--depth", type=int)

    b = sub.add_parser("bench-latency", help="per-decision wall-clock benchmark")
    common(b)
    b.add_argument("--ckpt", required=True)
    b.add_argument("--out", help="csv path (default: stdout)")
    b.add_argument("--contexts", default="1,3,6")
    b.add_argument("--horizons", default="1,2")
    b.add_argument("--candidates", default="8")

    i = sub.add_parser("inspect", help="summarize a dataset or checkpoint file")
    i.add_argument("path")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("ITAP_SEED"):
        try:
            seed = int(os.environ["ITAP_SEED"])
        except ValueError as e:
            raise ConfigError(f"ITAP_SEED is not an integer: {e}") from e
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def _floats_arg(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints_arg(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if args.regimes:
        cfg = replace(cfg, train_regimes=_floats_arg(args.regimes))
    if args.tiers:
        cfg = replace(cfg, tiers=tuple(args.tiers.split(",")))
    if args.episodes:
        cfg = replace(cfg, episodes_per_cell=args.episodes)
    episodes = generate_offline_dataset(
        cfg.env,
        cfg.train_regimes,
        cfg.tiers,
        cfg.episodes_per_cell,
        cfg.seed,
        max_steps=cfg.episode_steps,
        f_scale=cfg.f_scale,
    )
    write_dataset(args.out, episodes, cfg.gamma)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def _load_data(path: str, cfg: RunConfig):
    episodes, header = read_dataset(path)
    return episodes, replace(cfg, obs_dim=header["obs_dim"], act_dim=header["act_dim"])


def _cmd_train_rqvae(args) -> int:
    cfg = _resolve_config(args)
    if args.steps:
        cfg = replace(cfg, rqvae_steps=args.steps)
    if args.depth:
        cfg = replace(cfg, depth=args.depth)
    if args.codebook:
        cfg = replace(cfg, codebook_size=args.codebook)
    if getattr(args, "macro_len", None):
        cfg = replace(cfg, macro_len=args.macro_len)
    if args.context:
        cfg = replace(cfg, context_len=args.context)
    episodes, cfg = _load_data(args.data, cfg)
    model, _ = train_rqvae(cfg, episodes, log=print)
    save_models(args.out, cfg, model, None)
    print(f"wrote tokenizer checkpoint to {args.out}")
    return 0


def _cmd_train_prior(args) -> int:
    cfg = _resolve_config(args)
    loaded_cfg, rq, _ = load_models(args.rqvae)
    cfg = loaded_cfg if args.config is None else cfg
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps:
        cfg = replace(cfg, prior_steps=args.steps)
    episodes, cfg = _load_data(args.data, cfg)
    prior_model, _ = train_prior(cfg, episodes, rq, log=print)
    save_models(args.out, cfg, rq, prior_model)
    print(f"wrote full checkpoint to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg, rq, pr = load_models(args.ckpt)
    if pr is None:
        raise DataFormatError("checkpoint has no prior block; run train-prior first")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    regimes = _floats_arg(args.regimes) if args.regimes else cfg.eval_regimes
    n_seeds = args.seeds or cfg.eval_seeds
    episodes = args.episodes or cfg.eval_episodes
    seeds = [cfg.seed + i for i in range(n_seeds)]
    report = evaluate_policy(
        cfg,
        rq,
        pr,
        regimes,
        seeds,
        episodes,
        horizon=args.horizon,
        context=args.context,
        iterations=args.iterations,
        depth=args.depth,
        log=lambda m: print(m, file=sys.stderr),
    )
    text = report.to_text()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        with open(args.out + ".csv", "w", encoding="utf-8") as f:
            f.write(report.to_csv())
        print(f"wrote report to {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_bench(args) -> int:
    cfg, rq, pr = load_models(args.ckpt)
    if pr is None:
        raise DataFormatError("checkpoint has no prior block; run train-prior first")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    report = bench_latency(
        cfg,
        rq,
        pr,
        _ints_arg(args.contexts),
        _ints_arg(args.horizons),
        _ints_arg(args.candidates),
        log=lambda m: print(m, file=sys.stderr),
    )
    print(report.to_text(), end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.latency_csv())
        print(f"wrote csv to {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == DATASET_MAGIC:
        episodes, header = read_dataset(args.path)
        lengths = [len(e) for e in episodes]
        regimes = sorted({float(e.regime_label) for e in episodes})
        print(f"dataset: {header['episodes']} episodes, obs_dim={header['obs_dim']}, "
              f"act_dim={header['act_dim']}, gamma={header['gamma']:.4f}")
        print(f"steps per episode: min={min(lengths)} max={max(lengths)}")
        print(f"regime labels: {', '.join(f'{r:g}' for r in regimes)}")
    elif magic == CHECKPOINT_MAGIC:
        blocks, config_text = read_checkpoint(args.path)
        print(f"checkpoint blocks: {', '.join(sorted(blocks))}")
        for name, tensors in sorted(blocks.items()):
            total = sum(int(np.prod(a.shape)) for a in tensors.values())
            print(f"  {name}: {len(tensors)} tensors, {total} parameters")
        print("-- embedded config --")
        print(config_text.rstrip())
    else:
        raise DataFormatError(f"unrecognized file magic: {magic!r}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-rqvae": _cmd_train_rqvae,
    "train-prior": _cmd_train_prior,
    "eval": _cmd_eval,
    "bench-latency": _cmd_bench,
    "inspect": _cmd_inspect,
}


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # argparse exits directly for --help
            return int(e.code or 0)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataFormatError, ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericalDivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
