# furnistyle/config.py
"""
Project-wide defaults and helpers shared by every module.

Module-specific settings live next to the code that uses them
(ModelConfig in models.py, TrainingConfig in training.py, ...).
This file only holds the constants several modules agree on.
"""

from __future__ import annotations
import dataclasses
import zlib
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar

import numpy as np

from .errors import ConfigError

# ─── Numerics ───────────────────────────────────────────────────────
DTYPE = np.float64

# ─── File format tags ───────────────────────────────────────────────
CHECKPOINT_FORMAT = "furnistyle-checkpoint/1"
INDEX_FORMAT = "furnistyle-index/1"
DATASET_HEADER = "#furnistyle-dataset v1"
PAIRS_HEADER = "#furnistyle-pairs v1"
REMOVALS_HEADER = "#furnistyle-removals v1"
IMAGES_FORMAT = "furnistyle-images/1"

# ─── Defaults ───────────────────────────────────────────────────────
DEFAULT_SEED = 0
DEFAULT_OUT_DIR = Path("runs")
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.68, 0.12, 0.20)

# Reference scale: 17 styles, six furniture types, 17-image VTE batches.
NUM_STYLES = 17
NUM_TYPES = 6
VTE_NEGATIVES = 16
NEG_RATIO = 16


def named_rng(seed: int, name: str) -> np.random.Generator:
    """
    Independent generator for a named sub-stream of `seed`.
    crc32 keeps the stream id stable across interpreter runs.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


T = TypeVar("T")


def dataclass_from_dict(cls: Type[T], data: Mapping[str, Any] | None, where: str) -> T:
    """Build dataclass `cls` from a mapping, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**data)


def dataclass_to_dict(obj: Any) -> Dict[str, Any]:
    out = dataclasses.asdict(obj)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
        elif isinstance(v, Path):
            out[k] = str(v)
    return out
