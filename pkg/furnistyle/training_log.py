# furnistyle/training_log.py
"""
training_log.py
Writes one line-delimited log file per training run.

File format:
<header block: run metadata, the only place a timestamp appears>
[epoch EEE] stage=STAGE | loss=L | val_auc=A

Example:
[epoch 000] stage=init | loss=- | val_auc=0.503311
[epoch 000] stage=head | loss=12.418230 | val_auc=0.741002
[epoch 001] stage=finetune | loss=9.002114 | val_auc=0.782345
"""

from __future__ import annotations
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: str
    loss: Optional[float]
    metric: Optional[float]
    metric_name: str = "val_auc"

    def format(self) -> str:
        loss = "-" if self.loss is None else f"{self.loss:.6f}"
        metric = "-" if self.metric is None else f"{self.metric:.6f}"
        return f"[epoch {self.epoch:03d}] stage={self.stage} | loss={loss} | {self.metric_name}={metric}"


def parse_record(line: str) -> EpochRecord:
    """Inverse of EpochRecord.format (used by tests and the margin sweep report)."""
    head, loss_part, metric_part = [p.strip() for p in line.split("|")]
    epoch = int(head[len("[epoch ") : head.index("]")])
    stage = head.split("stage=", 1)[1]
    loss = loss_part.split("=", 1)[1]
    name, metric = metric_part.split("=", 1)
    return EpochRecord(
        epoch,
        stage,
        None if loss == "-" else float(loss),
        None if metric == "-" else float(metric),
        name,
    )


class TrainingLogger:
    """
    Appends epoch records to a training log file.
    One file per training run.
    """

    def __init__(
        self,
        path: Path,
        variant: str,
        seed: int,
        session_start_time: Optional[float] = None,
    ):
        self.path = Path(path)
        self.variant = variant
        self.seed = int(seed)
        self.session_start_time = session_start_time or time.time()
        self.records: List[EpochRecord] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._write_header()

    def _write_header(self) -> None:
        started = datetime.fromtimestamp(self.session_start_time).strftime("%Y-%m-%d %H:%M:%S")
        header = (
            f"{'=' * 80}\n"
            f"Training Run\n"
            f"{'=' * 80}\n"
            f"Variant: {self.variant}\n"
            f"Seed: {self.seed}\n"
            f"Session Start: {started}\n"
            f"{'=' * 80}\n"
            f"Format: [epoch EEE] stage=STAGE | loss=L | METRIC=V\n"
            f"{'=' * 80}\n"
        )
        self.path.write_text(header, encoding="utf-8")

    def log(self, record: EpochRecord) -> None:
        self.records.append(record)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(record.format() + "\n")

    def log_status(self, message: str) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"# {message}\n")

    def finalize(self) -> str:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{'=' * 80}\nRecords: {len(self.records)}\n{'=' * 80}\n")
        return str(self.path)


def read_records(path: Path) -> List[EpochRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_record(l) for l in lines if l.startswith("[epoch ")]
