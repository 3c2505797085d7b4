# furnistyle/evaluation.py
"""
evaluation.py
Compatibility scoring and the metrics reported for a trained model.

    score(d)      = 1 / (1 + d)
    roc_auc       = Mann-Whitney U / (n_pos * n_neg), ties count 1/2
    per-style AUC = a positive pair counts for its style, a negative pair for
                    the style of each endpoint
    recall@K      = fraction of queries with a relevant id in the top K
    distance KDE  = Gaussian kernel, Silverman bandwidth (floor 1e-6), averaged
                    over each grid cell so the curve integrates to 1

Outputs (write_report):
- report.txt  human-readable summary
- report.kv   key=value lines, sorted keys
- kde_pos.tsv / kde_neg.tsv  two-column (x, density) curves
"""

from __future__ import annotations
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Set

import numpy as np
from scipy import stats

from .config import DTYPE
from .dataset import PairSample
from .errors import ContractError, MetricError

logger = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6
KDE_GRID_SIZE = 512
KDE_PAD = 4.0  # grid extends this many bandwidths past the data
KDE_MIN_GRID = 8


# -------------------------
# Scores
# -------------------------
def compatibility_score(distance):
    d = np.asarray(distance, dtype=DTYPE)
    if np.any(d < 0):
        raise ContractError("compatibility_score: distance must be >= 0")
    s = 1.0 / (1.0 + d)
    return float(s) if s.ndim == 0 else s


def pair_distances(pairs: Sequence[PairSample], vectors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Euclidean distance per pair from precomputed per-id vectors."""
    if not pairs:
        return np.zeros(0, dtype=DTYPE)
    A = np.stack([vectors[p.i] for p in pairs])
    B = np.stack([vectors[p.j] for p in pairs])
    return np.sqrt(np.sum((A - B) ** 2, axis=1))


def pair_labels(pairs: Sequence[PairSample]) -> np.ndarray:
    return np.array([p.Y for p in pairs], dtype=np.int64)


# -------------------------
# AUC
# -------------------------
def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 or 1")
    return y.astype(bool)


def roc_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=DTYPE).reshape(-1)
    y = _binary_labels(labels)
    if s.size != y.size:
        raise MetricError(f"roc_auc: {s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"roc_auc needs both classes (pos={n_pos}, neg={n_neg})")
    ranks = stats.rankdata(s, method="average")
    u = float(ranks[y].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def per_style_auc(
    pairs: Sequence[PairSample],
    scores,
    style_of: Mapping[str, int],
) -> Dict[int, float]:
    s = np.asarray(scores, dtype=DTYPE).reshape(-1)
    if s.size != len(pairs):
        raise MetricError(f"per_style_auc: {s.size} scores vs {len(pairs)} pairs")
    pools: Dict[int, List[int]] = {}
    for k, p in enumerate(pairs):
        owners = {style_of[p.i]} if p.Y == 1 else {style_of[p.i], style_of[p.j]}
        for st in owners:
            pools.setdefault(int(st), []).append(k)
    out: Dict[int, float] = {}
    for st in sorted(pools):
        idx = np.array(pools[st])
        y = np.array([pairs[k].Y for k in idx])
        if y.min() == y.max():
            logger.warning(
                "style %d omitted from per-style AUC: only %s pairs",
                st,
                "positive" if y[0] == 1 else "negative",
            )
            continue
        out[st] = roc_auc(s[idx], y)
    return out


# -------------------------
# Recall / probes
# -------------------------
def recall_at_k(ranked_ids: Sequence[Sequence[str]], relevant: Sequence[Set[str]], k: int) -> float:
    if k < 1:
        raise ContractError(f"recall_at_k: K must be >= 1, got {k}")
    if len(ranked_ids) == 0:
        raise MetricError("recall_at_k: empty query set")
    if len(ranked_ids) != len(relevant):
        raise MetricError(f"recall_at_k: {len(ranked_ids)} rankings vs {len(relevant)} relevant sets")
    hits = sum(1 for ranked, rel in zip(ranked_ids, relevant) if set(ranked[:k]) & set(rel))
    return hits / len(ranked_ids)


def active_negative_fraction(distances, labels, margin: float) -> float:
    """Share of negative pairs still inside the margin (d < m), i.e. contributing loss."""
    d = np.asarray(distances, dtype=DTYPE).reshape(-1)
    y = _binary_labels(labels)
    neg = d[~y]
    if neg.size == 0:
        raise MetricError("active_negative_fraction: no negative pairs")
    return float(np.mean(neg < margin))


def nearest_centroid_accuracy(train_X, train_y, test_X, test_y) -> float:
    """Accuracy of a nearest-class-mean classifier fitted on (train_X, train_y)."""
    train_X = np.asarray(train_X, dtype=DTYPE)
    test_X = np.asarray(test_X, dtype=DTYPE)
    train_y = np.asarray(train_y).reshape(-1)
    test_y = np.asarray(test_y).reshape(-1)
    if test_X.shape[0] == 0:
        raise MetricError("nearest_centroid_accuracy: empty test set")
    classes = np.unique(train_y)
    centroids = np.stack([train_X[train_y == c].mean(axis=0) for c in classes])
    d2 = np.sum((test_X[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == test_y))


# -------------------------
# Distance distributions
# -------------------------
def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=DTYPE).reshape(-1)
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    sigma = min(std, iqr / 1.34) if iqr > 0 else std
    return max(0.9 * sigma * x.size ** (-0.2), BANDWIDTH_FLOOR)


@dataclass
class KDECurves:
    grid: np.ndarray
    pos_density: np.ndarray
    neg_density: np.ndarray
    pos_bandwidth: float
    neg_bandwidth: float

    def overlap(self) -> float:
        """Integral of min(pos, neg): 0 for disjoint curves, 1 for identical ones."""
        return float(np.trapezoid(np.minimum(self.pos_density, self.neg_density), self.grid))


def _density(grid: np.ndarray, x: np.ndarray, h: float) -> np.ndarray:
    """Kernel mass falling in each grid cell, divided by the cell width; sums to 1 over the grid."""
    half = 0.5 * (grid[1] - grid[0])
    upper = stats.norm.cdf((grid[:, None] + half - x[None, :]) / h)
    lower = stats.norm.cdf((grid[:, None] - half - x[None, :]) / h)
    return (upper - lower).mean(axis=1) / (2.0 * half)


def distance_kde(
    pos_distances,
    neg_distances,
    bandwidth: Optional[float] = None,
    grid_size: int = KDE_GRID_SIZE,
) -> KDECurves:
    pos = np.asarray(pos_distances, dtype=DTYPE).reshape(-1)
    neg = np.asarray(neg_distances, dtype=DTYPE).reshape(-1)
    if pos.size < 2 or neg.size < 2:
        raise MetricError(f"distance_kde needs >= 2 samples per class (pos={pos.size}, neg={neg.size})")
    if bandwidth is not None and not bandwidth > 0:
        raise ContractError(f"distance_kde: bandwidth must be > 0, got {bandwidth}")
    if int(grid_size) < KDE_MIN_GRID:
        raise ContractError(f"distance_kde: grid_size must be >= {KDE_MIN_GRID}, got {grid_size}")
    h_pos = max(float(bandwidth), BANDWIDTH_FLOOR) if bandwidth else silverman_bandwidth(pos)
    h_neg = max(float(bandwidth), BANDWIDTH_FLOOR) if bandwidth else silverman_bandwidth(neg)
    lo = min(pos.min(), neg.min())
    hi = max(pos.max(), neg.max())
    # at least two cells between the data and either end of the grid
    pad = max(KDE_PAD * max(h_pos, h_neg), 2.0 * (hi - lo) / (int(grid_size) - 5))
    grid = np.linspace(lo - pad, hi + pad, int(grid_size))
    return KDECurves(grid, _density(grid, pos, h_pos), _density(grid, neg, h_neg), h_pos, h_neg)


def describe(arr: np.ndarray) -> str:
    if arr.size == 0:
        return "n=0"
    return (
        f"n={arr.size} mean={arr.mean():.3f} std={arr.std():.3f} "
        f"p05={np.percentile(arr, 5):.3f} p50={np.percentile(arr, 50):.3f} "
        f"p95={np.percentile(arr, 95):.3f}"
    )


# -------------------------
# Report
# -------------------------
@dataclass
class DistanceSummary:
    n: int
    mean: float
    std: float

    @classmethod
    def of(cls, d: np.ndarray) -> "DistanceSummary":
        return cls(int(d.size), float(d.mean()) if d.size else 0.0, float(d.std()) if d.size else 0.0)


@dataclass
class EvaluationReport:
    auc_overall: float
    auc_per_style: Dict[int, float]
    recall_at: Dict[int, float]
    pos: DistanceSummary
    neg: DistanceSummary
    kde: Optional[KDECurves] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        values = [self.auc_overall, *self.auc_per_style.values(), *self.recall_at.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise MetricError("AUC / recall values must lie in [0, 1]")

    def to_kv(self) -> Dict[str, str]:
        kv = {
            "auc_overall": f"{self.auc_overall:.6f}",
            "pos_n": str(self.pos.n),
            "pos_mean": f"{self.pos.mean:.6f}",
            "pos_std": f"{self.pos.std:.6f}",
            "neg_n": str(self.neg.n),
            "neg_mean": f"{self.neg.mean:.6f}",
            "neg_std": f"{self.neg.std:.6f}",
        }
        for st, v in self.auc_per_style.items():
            kv[f"auc_style_{st:02d}"] = f"{v:.6f}"
        for k, v in self.recall_at.items():
            kv[f"recall_at_{k:02d}"] = f"{v:.6f}"
        for name, v in self.extras.items():
            kv[name] = f"{v:.6f}"
        return kv


def build_report(
    pairs: Sequence[PairSample],
    distances,
    style_of: Mapping[str, int],
    recall_at: Optional[Mapping[int, float]] = None,
    extras: Optional[Mapping[str, float]] = None,
) -> EvaluationReport:
    d = np.asarray(distances, dtype=DTYPE).reshape(-1)
    y = pair_labels(pairs)
    scores = compatibility_score(d)
    pos, neg = d[y == 1], d[y == 0]
    kde = distance_kde(pos, neg) if pos.size >= 2 and neg.size >= 2 else None
    return EvaluationReport(
        auc_overall=roc_auc(scores, y),
        auc_per_style=per_style_auc(pairs, scores, style_of),
        recall_at=dict(recall_at or {}),
        pos=DistanceSummary.of(pos),
        neg=DistanceSummary.of(neg),
        kde=kde,
        extras=dict(extras or {}),
    )


def _write_curve(path: Path, x: np.ndarray, y: np.ndarray) -> None:
    lines = ["x\tdensity"] + [f"{a:.9g}\t{b:.9g}" for a, b in zip(x, y)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(report: EvaluationReport, out_dir: Path, title: str = "Evaluation") -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kv = report.to_kv()
    kv_path = out_dir / "report.kv"
    kv_path.write_text("".join(f"{k}={kv[k]}\n" for k in sorted(kv)), encoding="utf-8")

    lines = [
        f"=== {title} ===",
        f"AUC (overall): {report.auc_overall:.4f}",
        f"Positive distances: n={report.pos.n} mean={report.pos.mean:.3f} std={report.pos.std:.3f}",
        f"Negative distances: n={report.neg.n} mean={report.neg.mean:.3f} std={report.neg.std:.3f}",
    ]
    if report.auc_per_style:
        lines.append("")
        lines.append("Per-style AUC:")
        lines += [f"  style {st:02d}: {v:.4f}" for st, v in sorted(report.auc_per_style.items())]
    if report.recall_at:
        lines.append("")
        lines += [f"Recall@{k}: {v:.4f}" for k, v in sorted(report.recall_at.items())]
    if report.extras:
        lines.append("")
        lines += [f"{name}: {v:.4f}" for name, v in sorted(report.extras.items())]
    txt_path = out_dir / "report.txt"
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    written = [txt_path, kv_path]
    if report.kde is not None:
        _write_curve(out_dir / "kde_pos.tsv", report.kde.grid, report.kde.pos_density)
        _write_curve(out_dir / "kde_neg.tsv", report.kde.grid, report.kde.neg_density)
        written += [out_dir / "kde_pos.tsv", out_dir / "kde_neg.tsv"]
    return written
