from .config import ConfigError, config_hash, load_config, validate_config
from .report import aggregate, collect_records, report
from .runner import MissingDataError, build_datasets, run, run_single, sweep

__all__ = [
    "ConfigError",
    "MissingDataError",
    "aggregate",
    "build_datasets",
    "collect_records",
    "config_hash",
    "load_config",
    "report",
    "run",
    "run_single",
    "sweep",
    "validate_config",
]
