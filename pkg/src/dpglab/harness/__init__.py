"""Configuration, experiments, invariant checks and the command line."""

from .config import ExperimentConfig, config_schema, dump_config, load_config
from .corpus import toy_corpus, toy_prior
from .experiments import compare_estimators, make_problem, psnr, run_experiment, sweep

__all__ = [
    "ExperimentConfig",
    "config_schema",
    "dump_config",
    "load_config",
    "toy_corpus",
    "toy_prior",
    "compare_estimators",
    "make_problem",
    "psnr",
    "run_experiment",
    "sweep",
]
