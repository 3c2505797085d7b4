# furnistyle/curation.py
"""
Dataset cleaning: perceptual-hash duplicate removal, type-classifier
outlier removal, and stratified 68:12:20 splitting.

pHash pipeline:
    mean-pool resize to 32x32 -> 2-D DCT-II -> top-left 8x8 block
    -> bit = coefficient > median of the 63 non-DC coefficients (DC bit = 0)
Bits are packed row-major, first coefficient in the most significant bit.
"""

from __future__ import annotations
import dataclasses
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import sparse, special
from scipy.sparse import csgraph

from .config import DTYPE, REMOVALS_HEADER, SPLIT_RATIOS, SPLITS, named_rng
from .dataset import ItemRecord, feature_matrix
from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)

HASH_SIZE = 8
RESIZE_TO = 32
HASH_BITS = HASH_SIZE * HASH_SIZE


# -------------------------
# Config
# -------------------------
@dataclass
class CurationConfig:
    hamming_threshold: int = 4
    outlier_fraction: float = 0.05
    split_ratios: Tuple[float, float, float] = SPLIT_RATIOS
    min_cell: int = 3

    def validate(self) -> "CurationConfig":
        if not 0 <= int(self.hamming_threshold) <= HASH_BITS:
            raise ConfigError(f"curation.hamming_threshold must be in [0, 64], got {self.hamming_threshold}")
        if not 0.0 < float(self.outlier_fraction) < 1.0:
            raise ConfigError(f"curation.outlier_fraction must be in (0, 1), got {self.outlier_fraction}")
        _check_ratios(self.split_ratios)
        if int(self.min_cell) < 1:
            raise ConfigError(f"curation.min_cell must be >= 1, got {self.min_cell}")
        return self


def _check_ratios(ratios: Sequence[float]) -> None:
    r = [float(x) for x in ratios]
    if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {list(ratios)}")


# -------------------------
# Perceptual hash
# -------------------------
@dataclass(frozen=True)
class PHash:
    bits: int

    def __int__(self) -> int:
        return self.bits

    def __str__(self) -> str:
        return f"{self.bits:016x}"


def phash(image) -> PHash:
    img = np.asarray(image, dtype=DTYPE)
    if img.size == 0:
        raise InputError("phash: empty image")
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.ndim != 2:
        raise InputError(f"phash: expected a 2-D intensity grid, got shape {img.shape}")
    small = cv2.resize(img, (RESIZE_TO, RESIZE_TO), interpolation=cv2.INTER_AREA)
    coeffs = cv2.dct(np.ascontiguousarray(small))[:HASH_SIZE, :HASH_SIZE].reshape(-1)
    med = np.median(coeffs[1:])
    bits = coeffs > med
    bits[0] = False
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return PHash(value)


def hamming(h1, h2) -> int:
    return (int(h1) ^ int(h2)).bit_count()


# -------------------------
# Removal log
# -------------------------
@dataclass(frozen=True)
class Removal:
    id: str
    cause: str
    partner: str
    value: float


def write_removal_log(path: Path, removals: Sequence[Removal]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [REMOVALS_HEADER] + [f"{r.id}\t{r.cause}\t{r.partner}\t{r.value:.6g}" for r in removals]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -------------------------
# Duplicates
# -------------------------
def _chunks(threshold: int) -> Optional[List[Tuple[int, int]]]:
    """Bit ranges for multi-index search; None means compare every pair."""
    n = threshold + 1
    if n > 16:
        return None
    edges = np.linspace(0, HASH_BITS, n + 1).astype(int)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(n)]


def candidate_pairs(hashes: Sequence[int], threshold: int) -> List[Tuple[int, int]]:
    """
    Index pairs whose Hamming distance may be <= threshold. Splitting the
    hash into threshold+1 chunks, two such hashes agree on at least one chunk.
    """
    n = len(hashes)
    chunks = _chunks(threshold)
    if chunks is None:
        return [(a, b) for a in range(n) for b in range(a + 1, n)]
    found = set()
    for lo, hi in chunks:
        width = hi - lo
        buckets: Dict[int, List[int]] = defaultdict(list)
        for k, h in enumerate(hashes):
            buckets[(h >> (HASH_BITS - hi)) & ((1 << width) - 1)].append(k)
        for members in buckets.values():
            for x in range(len(members)):
                for y in range(x + 1, len(members)):
                    found.add((members[x], members[y]))
    return sorted(found)


def dedup(
    items_with_hashes: Sequence[Tuple[ItemRecord, PHash]],
    threshold: int = 4,
) -> Tuple[List[ItemRecord], List[Removal]]:
    """
    Items within `threshold` Hamming distance are duplicates; duplicate
    relations are closed transitively into clusters.
    - all styles equal  -> keep the smallest id, remove the rest
    - styles differ     -> remove the whole cluster
    """
    if not 0 <= int(threshold) <= HASH_BITS:
        raise ConfigError(f"hamming threshold must be in [0, 64], got {threshold}")
    items = [it for it, _ in items_with_hashes]
    hashes = [int(h) for _, h in items_with_hashes]
    if not items:
        return [], []
    close: List[Tuple[int, int]] = []
    edges: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
    for a, b in candidate_pairs(hashes, int(threshold)):
        d = hamming(hashes[a], hashes[b])
        if d <= threshold:
            close.append((a, b))
            edges[a].append((d, b))
            edges[b].append((d, a))

    n = len(items)
    rows = np.array([a for a, _ in close], dtype=np.int64)
    cols = np.array([b for _, b in close], dtype=np.int64)
    graph = sparse.coo_matrix((np.ones(len(close), dtype=np.int8), (rows, cols)), shape=(n, n))
    _, labels = csgraph.connected_components(graph, directed=False)

    clusters: Dict[int, List[int]] = defaultdict(list)
    for k, label in enumerate(labels):
        clusters[int(label)].append(k)

    removed: Dict[int, Removal] = {}
    for members in clusters.values():
        if len(members) < 2:
            continue
        if len({items[k].style for k in members}) == 1:
            keep = min(members, key=lambda k: items[k].id)
            for k in members:
                if k != keep:
                    removed[k] = Removal(
                        items[k].id, "duplicate_same_style", items[keep].id, float(hamming(hashes[k], hashes[keep]))
                    )
        else:
            for k in members:
                d, partner = min(edges[k], key=lambda e: (e[0], items[e[1]].id))
                removed[k] = Removal(items[k].id, "duplicate_cross_style", items[partner].id, float(d))

    kept = [it for k, it in enumerate(items) if k not in removed]
    log = sorted(removed.values(), key=lambda r: r.id)
    logger.info("dedup: %d of %d items removed (threshold %d)", len(log), len(items), threshold)
    return kept, log


# -------------------------
# Outliers
# -------------------------
@dataclass
class CentroidTypeClassifier:
    """
    Soft-max over -||x - mu_t||^2 / (2 sigma^2): Gaussian class-conditional
    model with one shared isotropic variance, fitted on furniture types.
    """

    num_types: int
    means: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    present: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    variance: float = 1.0

    @classmethod
    def fit(cls, X: np.ndarray, types: Sequence[int], num_types: int) -> "CentroidTypeClassifier":
        X = np.asarray(X, dtype=DTYPE)
        t = np.asarray(types, dtype=np.int64)
        if X.shape[0] == 0:
            raise InputError("CentroidTypeClassifier.fit: no samples")
        means = np.zeros((num_types, X.shape[1]), dtype=DTYPE)
        present = np.zeros(num_types, dtype=bool)
        for k in range(num_types):
            rows = X[t == k]
            if rows.size:
                means[k] = rows.mean(axis=0)
                present[k] = True
        resid = X - means[t]
        variance = max(float(np.mean(resid**2)), 1e-12)
        return cls(num_types, means, present, variance)

    @classmethod
    def fit_items(cls, items: Sequence[ItemRecord], num_types: int) -> "CentroidTypeClassifier":
        return cls.fit(feature_matrix(items), [it.furniture_type for it in items], num_types)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=DTYPE)
        d2 = np.sum((X[:, None, :] - self.means[None, :, :]) ** 2, axis=2)
        logits = np.where(self.present[None, :], -d2 / (2.0 * self.variance), -np.inf)
        return special.softmax(logits, axis=1)


def outlier_filter(
    items: Sequence[ItemRecord],
    classifier: CentroidTypeClassifier,
    removal_fraction: float,
) -> Tuple[List[ItemRecord], List[Removal]]:
    """Drop the floor(fraction * n) items least confidently classified as their labeled type."""
    if not 0.0 < float(removal_fraction) < 1.0:
        raise ConfigError(f"removal_fraction must be in (0, 1), got {removal_fraction}")
    n_remove = int(np.floor(float(removal_fraction) * len(items)))
    if n_remove == 0:
        return list(items), []
    proba = classifier.predict_proba(feature_matrix(items))
    scores = proba[np.arange(len(items)), [it.furniture_type for it in items]]
    order = sorted(range(len(items)), key=lambda k: (scores[k], items[k].id))
    drop = set(order[:n_remove])
    removals = [Removal(items[k].id, "outlier", "-", float(scores[k])) for k in sorted(drop, key=lambda k: items[k].id)]
    logger.info("outlier filter: %d of %d items removed", n_remove, len(items))
    return [it for k, it in enumerate(items) if k not in drop], removals


# -------------------------
# Splits
# -------------------------
def _allocate(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder rounding of n * ratios; ties favour earlier splits."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    rest = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def split(
    items: Sequence[ItemRecord],
    ratios: Sequence[float] = SPLIT_RATIOS,
    seed: int = 0,
    min_cell: int = 3,
) -> List[ItemRecord]:
    """Assign train/val/test per (style, furniture_type) cell. Output keeps input order."""
    _check_ratios(ratios)
    cells: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    for k, it in enumerate(items):
        cells[(it.style, it.furniture_type)].append(k)

    rng = named_rng(seed, "split")
    assigned: Dict[int, str] = {}
    for cell in sorted(cells):
        members = sorted(cells[cell], key=lambda k: items[k].id)
        if len(members) < min_cell:
            logger.warning(
                "cell style=%d type=%d has %d item(s) (< %d); all assigned to train",
                cell[0],
                cell[1],
                len(members),
                min_cell,
            )
            for k in members:
                assigned[k] = SPLITS[0]
            continue
        perm = rng.permutation(len(members))
        counts = _allocate(len(members), ratios)
        labels = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
        for pos, lab in zip(perm, labels):
            assigned[members[int(pos)]] = lab
    return [dataclasses.replace(it, split=assigned[k]) for k, it in enumerate(items)]


def split_counts(items: Iterable[ItemRecord]) -> Dict[str, int]:
    out = {s: 0 for s in SPLITS}
    for it in items:
        if it.split in out:
            out[it.split] += 1
    return out
