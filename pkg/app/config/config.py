# -*- coding:utf-8 -*-
"""
@file: config.py
@desc: process-level settings (environment / .env)
"""

import os
from typing import Optional

from pydantic_settings import BaseSettings


class Setting(BaseSettings):
    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"

    PROJECT_NAME: str = "pest-toolkit"
    DESCRIPTION: str = "prompt ensemble self-training on a toy vision-language model"

    # experiment defaults
    DEFAULT_CONFIG: str = os.path.join(os.path.dirname(__file__), "default.yaml")
    DEFAULT_OUT_DIR: str = "outputs"
    DEFAULT_SEED: int = 42
    SHOW_PROGRESS: bool = False

    # log
    LOG_DIR: Optional[str] = None
    LOG_LEVEL: str = "INFO"


settings = Setting()  # type: ignore
