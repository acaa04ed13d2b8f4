from typing import List

from pydantic import BaseModel, ConfigDict

CHECKPOINT_VERSION = 1


class EncoderCheckpoint(BaseModel):
    """Structured-text encoder record; floats are stored as `float.hex` strings
    so a write/read cycle is bit exact."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = CHECKPOINT_VERSION
    role: str
    in_dim: int
    out_dim: int
    weight: List[str]  # row-major, out_dim * in_dim entries
    bias: List[str]
