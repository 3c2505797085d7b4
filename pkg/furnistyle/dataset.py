# furnistyle/dataset.py
"""
Item and pair records plus their line-delimited file formats.

Dataset file:
    #furnistyle-dataset v1 input_dim=64 num_styles=17 ...
    id <TAB> style <TAB> furniture_type <TAB> f1,f2,... <TAB> t1,t2,... <TAB> split

Pair file:
    #furnistyle-pairs v1
    id_i <TAB> id_j <TAB> Y

Floats are written with repr() so a write/read cycle is exact. An item with
no split yet is written with split "-".
"""

from __future__ import annotations
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import DATASET_HEADER, DTYPE, PAIRS_HEADER, SPLITS
from .errors import InputError, SamplingError

logger = logging.getLogger(__name__)

NO_SPLIT = "-"


# -------------------------
# Records
# -------------------------
@dataclass(frozen=True, eq=False)
class ItemRecord:
    id: str
    features: np.ndarray
    style: int
    furniture_type: int
    tokens: Tuple[int, ...]
    split: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=DTYPE).reshape(-1))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "style", int(self.style))
        object.__setattr__(self, "furniture_type", int(self.furniture_type))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ItemRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.style == other.style
            and self.furniture_type == other.furniture_type
            and self.tokens == other.tokens
            and self.split == other.split
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class PairSample:
    i: str
    j: str
    Y: int

    @staticmethod
    def canonical(a: str, b: str, Y: int) -> "PairSample":
        return PairSample(a, b, int(Y)) if a <= b else PairSample(b, a, int(Y))


def validate_items(
    items: Sequence[ItemRecord],
    input_dim: Optional[int] = None,
    num_styles: Optional[int] = None,
    num_types: Optional[int] = None,
) -> None:
    """Raise InputError on the first record breaking an ItemRecord invariant."""
    seen = set()
    for it in items:
        if it.id in seen:
            raise InputError(f"duplicate item id '{it.id}'")
        seen.add(it.id)
        if not it.id or any(c in it.id for c in "\t\n"):
            raise InputError(f"item id {it.id!r} is empty or contains tab/newline")
        if input_dim is not None and it.features.size != input_dim:
            raise InputError(f"item '{it.id}': features length {it.features.size} != input_dim {input_dim}")
        if not np.all(np.isfinite(it.features)):
            raise InputError(f"item '{it.id}': non-finite feature value")
        if num_styles is not None and not 0 <= it.style < num_styles:
            raise InputError(f"item '{it.id}': style {it.style} outside [0, {num_styles})")
        if num_types is not None and not 0 <= it.furniture_type < num_types:
            raise InputError(f"item '{it.id}': furniture_type {it.furniture_type} outside [0, {num_types})")
        if it.split is not None and it.split not in SPLITS:
            raise InputError(f"item '{it.id}': split '{it.split}' not one of {SPLITS}")


def items_by_id(items: Iterable[ItemRecord]) -> Dict[str, ItemRecord]:
    return {it.id: it for it in items}


def items_in_split(items: Iterable[ItemRecord], split: str) -> List[ItemRecord]:
    return [it for it in items if it.split == split]


def feature_matrix(items: Sequence[ItemRecord]) -> np.ndarray:
    if not items:
        raise InputError("no items")
    return np.stack([it.features for it in items]).astype(DTYPE)


def pair_violations(pairs: Iterable[PairSample], by_id: Mapping[str, ItemRecord]) -> List[str]:
    """Every PairSample invariant violation, as readable messages (empty when valid)."""
    problems: List[str] = []
    seen = set()
    for p in pairs:
        key = (min(p.i, p.j), max(p.i, p.j))
        if key in seen:
            problems.append(f"duplicate pair {key}")
        seen.add(key)
        if p.i == p.j:
            problems.append(f"self pair {p.i}")
            continue
        a, b = by_id.get(p.i), by_id.get(p.j)
        if a is None or b is None:
            problems.append(f"pair ({p.i}, {p.j}) references an unknown id")
            continue
        if p.Y == 1 and (a.style != b.style or a.furniture_type == b.furniture_type):
            problems.append(f"positive ({p.i}, {p.j}) needs same style and different type")
        elif p.Y == 0 and a.style == b.style:
            problems.append(f"negative ({p.i}, {p.j}) shares style {a.style}")
        elif p.Y not in (0, 1):
            problems.append(f"pair ({p.i}, {p.j}) has label {p.Y}")
        if a.split != b.split:
            problems.append(f"pair ({p.i}, {p.j}) crosses splits {a.split}/{b.split}")
    return problems


def check_pairs(pairs: Sequence[PairSample], by_id: Mapping[str, ItemRecord]) -> None:
    problems = pair_violations(pairs, by_id)
    if problems:
        raise SamplingError(f"{len(problems)} invalid pair(s); first: {problems[0]}")


# -------------------------
# Dataset file
# -------------------------
def _fmt_floats(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def _header_line(tag: str, meta: Mapping[str, object]) -> str:
    parts = [tag] + [f"{k}={meta[k]}" for k in sorted(meta)]
    return " ".join(parts)


def _parse_header(line: str, tag: str, path: Path) -> Dict[str, object]:
    if not line.startswith(tag):
        raise InputError(f"{path}:1: expected header '{tag}', got {line[:40]!r}")
    meta: Dict[str, object] = {}
    for part in line[len(tag):].split():
        if "=" not in part:
            raise InputError(f"{path}:1: malformed header field {part!r}")
        k, v = part.split("=", 1)
        try:
            meta[k] = int(v)
        except ValueError:
            meta[k] = v
    return meta


def write_dataset(path: Path, items: Sequence[ItemRecord], meta: Optional[Mapping[str, object]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = dict(meta or {})
    if items:
        head.setdefault("input_dim", int(items[0].features.size))
    head["count"] = len(items)
    lines = [_header_line(DATASET_HEADER, head)]
    for it in items:
        lines.append(
            "\t".join(
                [
                    it.id,
                    str(it.style),
                    str(it.furniture_type),
                    _fmt_floats(it.features),
                    ",".join(str(t) for t in it.tokens),
                    it.split or NO_SPLIT,
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path: Path) -> Tuple[List[ItemRecord], Dict[str, object]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise InputError(f"{path}: empty file")
    meta = _parse_header(lines[0], DATASET_HEADER, path)
    items: List[ItemRecord] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise InputError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        rid, style, ftype, feats, toks, split = fields
        try:
            features = np.array([float(v) for v in feats.split(",")], dtype=DTYPE) if feats else np.zeros(0)
        except ValueError:
            raise InputError(f"{path}:{lineno}: field 'features' is not a float list") from None
        try:
            tokens = tuple(int(t) for t in toks.split(",")) if toks else ()
            style_i, type_i = int(style), int(ftype)
        except ValueError:
            raise InputError(f"{path}:{lineno}: field 'style'/'furniture_type'/'tokens' is not an integer") from None
        items.append(ItemRecord(rid, features, style_i, type_i, tokens, None if split == NO_SPLIT else split))
    try:
        validate_items(
            items,
            input_dim=meta.get("input_dim"),  # type: ignore[arg-type]
            num_styles=meta.get("num_styles"),  # type: ignore[arg-type]
            num_types=meta.get("num_types"),  # type: ignore[arg-type]
        )
    except InputError as e:
        raise InputError(f"{path}: {e}") from None
    if "count" in meta and meta["count"] != len(items):
        raise InputError(f"{path}: header count={meta['count']} but {len(items)} records")
    logger.debug("read %d items from %s", len(items), path)
    return items, meta


# -------------------------
# Pair file
# -------------------------
def write_pairs(path: Path, pairs: Sequence[PairSample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [PAIRS_HEADER] + [f"{p.i}\t{p.j}\t{p.Y}" for p in pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs(path: Path) -> List[PairSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Pair file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != PAIRS_HEADER:
        raise InputError(f"{path}:1: expected header '{PAIRS_HEADER}'")
    pairs: List[PairSample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in ("0", "1"):
            raise InputError(f"{path}:{lineno}: expected 'id_i<TAB>id_j<TAB>Y' with Y in {{0,1}}")
        pairs.append(PairSample(fields[0], fields[1], int(fields[2])))
    return pairs
