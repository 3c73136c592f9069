"""Run a grid of experiments from a shared database table."""

from gridq.config import (
    ConfigError,
    FieldType,
    KeyField,
    ResultField,
    StudyConfig,
    format_config,
    load_config,
    parse_config,
    validate_config,
)
from gridq.executor import (
    ExperimentFailed,
    ResultSink,
    RunReport,
    execute_one,
    make_worker_id,
    run_worker,
)
from gridq.grid import ExperimentKey, expand_grid, merge_manual
from gridq.store import (
    ClaimedExperiment,
    ProtocolError,
    Status,
    Store,
    StoreError,
)

__all__ = [
    "ClaimedExperiment",
    "ConfigError",
    "ExperimentFailed",
    "ExperimentKey",
    "FieldType",
    "KeyField",
    "ProtocolError",
    "ResultField",
    "ResultSink",
    "RunReport",
    "Status",
    "Store",
    "StoreError",
    "StudyConfig",
    "execute_one",
    "expand_grid",
    "format_config",
    "load_config",
    "make_worker_id",
    "merge_manual",
    "parse_config",
    "run_worker",
    "validate_config",
]
