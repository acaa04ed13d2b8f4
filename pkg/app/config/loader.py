# -*- coding:utf-8 -*-
"""
@file: loader.py
@desc: YAML experiment config -> validated ExperimentPlan
"""

from typing import Optional

import yaml
from loguru import logger
from pydantic import ValidationError

from app.config.config import settings
from app.exception.exce import ConfigError
from app.schemas.config_schema import ExperimentConfig, ExperimentPlan, describe_validation_error
from app.schemas.task_schema import TaskSpec


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    path = path or settings.DEFAULT_CONFIG
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {describe_validation_error(e)}") from e
    logger.debug(f"loaded experiment config from {path}")
    return config


def build_plan(
    config: ExperimentConfig,
    seed: int,
    out_dir: str,
    task_path: Optional[str] = None,
    eq4_raw_weights: bool = False,
    eq7_raw_product: bool = False,
) -> ExperimentPlan:
    """Apply the command-line overrides (seed, flags, task file) to a config."""
    flags = {}
    if eq4_raw_weights:
        flags["eq4_raw_weights"] = True
    if eq7_raw_product:
        flags["eq7_raw_product"] = True
    adapt = config.run_config(**flags)
    runs = [
        spec.model_copy(update={"config": spec.config.model_copy(update=flags)})
        for spec in config.run_specs()
    ]
    return ExperimentPlan(
        task=None if task_path else TaskSpec.model_validate({**config.task.model_dump(), "seed": seed}),
        task_path=task_path,
        pretrain=config.pretrain,
        adapt=adapt,
        runs=runs,
        out_dir=out_dir,
        seed=seed,
    )
