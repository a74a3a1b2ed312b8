from .config import ConfigError, RunConfig, config_to_text, parse_config, parse_config_text
from .dataio import (
    CorruptionError,
    DataFormatError,
    UnsupportedVersionError,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from .evaluate import MetricsReport, bench_latency, evaluate_policy, planner_config_from
from .training import (
    NumericalDivergenceError,
    load_models,
    save_models,
    train_prior,
    train_rqvae,
)
from .cli import cli_dispatch
