"""Configuration, checkpoints, metrics, the experiment suite and the CLI."""

from .checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from .config import RunConfig, from_dict, load_config, validate, with_overrides
from .experiments import (Context, TrainResult, TransferResult, UpdateStudy, episode_accuracy, load_params,
                          prepare, run_meta_eval, run_meta_train, run_transfer_baseline, run_update_stats,
                          sweep_adaptation_steps, sweep_freeze_layers)
from .metrics import MetricsRecord, TrainLog, read_metrics, read_train_log, write_metrics, write_train_log

__all__ = [name for name in dir() if not name.startswith("_")]
