"""
Pydantic models for training run records.
"""

from datetime import datetime
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, Field

from .exceptions import ContractError


class EpochMetrics(BaseModel):
    """One training epoch."""
    epoch: int = Field(ge=1)
    lr: float
    task_loss: float
    str_penalty: float
    total_loss: float
    train_accuracy: float
    test_accuracy: List[float] = Field(default_factory=list)  # per timestep
    stf_mean: List[float] = Field(default_factory=list)  # per spiking layer
    stf_var: List[float] = Field(default_factory=list)
    firing_rates: List[float] = Field(default_factory=list)
    empty_str_batches: int = 0
    wall_clock: float = 0.0


class RunMetrics(BaseModel):
    """Append-only per-epoch history of a run."""
    rows: List[EpochMetrics] = Field(default_factory=list)

    def append(self, row: EpochMetrics) -> None:
        expected = len(self.rows) + 1
        if row.epoch != expected:
            raise ContractError(f"metrics row for epoch {row.epoch} appended where epoch {expected} was due")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        """One row per epoch; list fields become numbered columns (``test_acc_t1``, ``stf_mean_l1``, ...)."""
        records = []
        for row in self.rows:
            record: Dict[str, float] = {
                "epoch": row.epoch,
                "lr": row.lr,
                "task_loss": row.task_loss,
                "str_penalty": row.str_penalty,
                "total_loss": row.total_loss,
                "train_accuracy": row.train_accuracy,
                "empty_str_batches": row.empty_str_batches,
                "wall_clock": row.wall_clock,
            }
            for prefix, values, unit in (("test_acc", row.test_accuracy, "t"), ("stf_mean", row.stf_mean, "l"),
                                         ("stf_var", row.stf_var, "l"), ("firing_rate", row.firing_rates, "l")):
                for i, value in enumerate(values, start=1):
                    record[f"{prefix}_{unit}{i}"] = value
            records.append(record)
        return pd.DataFrame(records)


class RunSummary(BaseModel):
    """Written next to every run's outputs."""
    command: str
    config_hash: str
    version: str
    seed: int
    wall_clock: float
    started: str = Field(default_factory=lambda: datetime.now().isoformat())
    outputs: List[str] = Field(default_factory=list)
    final_accuracy: Optional[float] = None
