"""Run orchestration: configs, training stages, reporting and the CLI."""

from .config import RunConfig, load_config, parse_config_text
from .reporting import append_csv, metrics_row, read_csv, write_csv, write_curve_svg
from .train import (evaluate_model, load_checkpoint, prepare_finetune_model, run_evaluate,
                    run_finetune, run_pretrain, run_sample, run_sweep, save_checkpoint)

__all__ = [
    "RunConfig", "load_config", "parse_config_text", "append_csv", "metrics_row", "read_csv",
    "write_csv", "write_curve_svg", "evaluate_model", "load_checkpoint",
    "prepare_finetune_model", "run_evaluate", "run_finetune", "run_pretrain", "run_sample",
    "run_sweep", "save_checkpoint",
]
