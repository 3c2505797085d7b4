# furnistyle/checkpoint.py
"""
Checkpoint / index container.

One uncompressed .npz archive (readable with numpy.load):
    <name>.npy    one float64 array per named parameter / index matrix
    __meta__.npy  uint8 bytes of a UTF-8 JSON document (format tag, config, extras)

Entries are written in sorted order with a fixed zip timestamp, so equal
contents give byte-identical files. float64 arrays round-trip bit-exactly.
"""

from __future__ import annotations
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from . import autodiff as ad
from .config import CHECKPOINT_FORMAT, dataclass_from_dict, dataclass_to_dict
from .errors import InputError
from .models import ModelConfig, ModelParameters

META_KEY = "__meta__"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# -------------------------
# Container
# -------------------------
def ensure_parent(path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def save_container(path: Path, arrays: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> None:
    path = Path(path)
    ensure_parent(path)
    payload = dict(arrays)
    payload[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(payload[name]), allow_pickle=False)


def load_container(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Container not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: np.array(data[k]) for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise InputError(f"{path}: not a readable container ({e})") from None
    if META_KEY not in arrays:
        raise InputError(f"{path}: missing {META_KEY} entry")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    return arrays, meta


# -------------------------
# Checkpoints
# -------------------------
@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParameters
    variant: str
    extras: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Path,
    config: ModelConfig,
    params: ModelParameters,
    variant: str,
    extras: Dict[str, Any] | None = None,
) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "variant": variant,
        "model": dataclass_to_dict(config),
        "params": {n: list(params[n].shape) for n in params.names()},
        "extras": extras or {},
    }
    save_container(path, {n: params[n].values for n in params.names()}, meta)


def load_checkpoint(path: Path) -> Checkpoint:
    arrays, meta = load_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path}: format tag {meta.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    config = dataclass_from_dict(ModelConfig, meta["model"], where=f"{path}:model").validate()
    params = ModelParameters()
    for name, shape in meta["params"].items():
        if name not in arrays:
            raise InputError(f"{path}: parameter '{name}' listed in metadata but missing")
        arr = arrays[name]
        if list(arr.shape) != list(shape):
            raise InputError(f"{path}: parameter '{name}' has shape {arr.shape}, metadata says {shape}")
        params[name] = ad.parameter(arr)
    return Checkpoint(config, params, meta["variant"], meta.get("extras", {}))
