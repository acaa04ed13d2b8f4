import math
from typing import List

import pandas as pd
from pydantic import BaseModel, model_validator

from app.exception.exce import VectorError

METRICS_COLUMNS = ["epoch", "mode", "target_accuracy", "pseudo_label_accuracy", "mean_loss", "lr"]
PRETRAIN_COLUMNS = ["epoch", "loss", "batch_loss", "source_zero_shot_acc"]
SUMMARY_COLUMNS = ["run", "mode", "lam", "target_accuracy", "pseudo_label_accuracy"]


class PseudoLabel(BaseModel):
    sample_index: int
    label: int
    score: float


class MetricsRow(BaseModel):
    epoch: int
    target_accuracy: float
    pseudo_label_accuracy: float
    mean_loss: float
    lr: float

    @model_validator(mode="after")
    def _check(self) -> "MetricsRow":
        values = (self.target_accuracy, self.pseudo_label_accuracy, self.mean_loss, self.lr)
        if not all(math.isfinite(v) for v in values):
            raise VectorError(f"non-finite metrics at epoch {self.epoch}")
        if not (0.0 <= self.target_accuracy <= 1.0 and 0.0 <= self.pseudo_label_accuracy <= 1.0):
            raise VectorError(f"accuracy out of [0, 1] at epoch {self.epoch}")
        if self.mean_loss < 0:
            raise VectorError(f"negative loss at epoch {self.epoch}")
        return self


class RunMetrics(BaseModel):
    """Per-epoch record of one adaptation run; epoch 0 is the pretrained model."""

    run: str
    mode: str
    rows: List[MetricsRow] = []

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise VectorError(f"epochs must increase: {row.epoch} after {self.rows[-1].epoch}")
        self.rows.append(row)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_frame(self) -> pd.DataFrame:
        records = [{"mode": self.mode, **row.model_dump()} for row in self.rows]
        return pd.DataFrame.from_records(records, columns=METRICS_COLUMNS)


class PretrainRow(BaseModel):
    epoch: int
    # full source set, end of epoch
    loss: float
    batch_loss: float
    source_zero_shot_acc: float


def pretrain_frame(rows: List[PretrainRow]) -> pd.DataFrame:
    return pd.DataFrame.from_records([r.model_dump() for r in rows], columns=PRETRAIN_COLUMNS)
