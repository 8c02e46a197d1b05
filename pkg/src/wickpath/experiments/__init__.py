"""Configuration, runners and command-line entry point for the reproduction experiments."""

from .config import ConfigError, ExperimentConfig, parse_config, parse_text
from .runners import RunSummary, mc_summary, nearest_rank_quantile, run_experiment

__all__ = [
    "ConfigError", "ExperimentConfig", "parse_config", "parse_text",
    "RunSummary", "mc_summary", "nearest_rank_quantile", "run_experiment",
]
