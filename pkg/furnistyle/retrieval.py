# furnistyle/retrieval.py
"""
Exact nearest-neighbour search over item embeddings.

    euclidean : ascending distance (compatibility search in the siamese space)
    dot       : descending dot similarity (joint image-text space)

Ties are broken by item id, so results never depend on insertion order.
"""

from __future__ import annotations
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import ensure_parent, load_container, save_container
from .config import DTYPE, INDEX_FORMAT
from .dataset import ItemRecord, feature_matrix
from .errors import ContractError, InputError, MetricError, ShapeError
from .evaluation import recall_at_k
from .models import ModelConfig, ModelParameters, project_joint, text_encode, visual_features

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "dot")


# -------------------------
# Index
# -------------------------
@dataclass(frozen=True)
class EmbeddingIndex:
    ids: Tuple[str, ...]
    vectors: np.ndarray = field(repr=False)
    metric: str
    styles: Tuple[int, ...]
    types: Tuple[int, ...]

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ContractError(f"index metric must be one of {METRICS}, got '{self.metric}'")
        V = np.array(self.vectors, dtype=DTYPE)
        if V.ndim != 2 or V.shape[0] != len(self.ids):
            raise ShapeError(f"index: {len(self.ids)} ids but vectors of shape {V.shape}")
        if not (len(self.styles) == len(self.types) == len(self.ids)):
            raise ShapeError("index: ids, styles and types differ in length")
        if not np.all(np.isfinite(V)):
            raise InputError("index: non-finite embedding")
        V.setflags(write=False)
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "styles", tuple(int(s) for s in self.styles))
        object.__setattr__(self, "types", tuple(int(t) for t in self.types))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def row(self, item_id: str) -> int:
        try:
            return self.ids.index(item_id)
        except ValueError:
            raise InputError(f"id '{item_id}' not in index") from None


def build_index(
    items: Sequence[ItemRecord],
    embedder: Callable[[np.ndarray], np.ndarray],
    metric: str = "euclidean",
) -> EmbeddingIndex:
    """Embed every item once; `embedder` maps a feature matrix to a row matrix of vectors."""
    if not items:
        raise InputError("build_index: no items")
    V = np.asarray(embedder(feature_matrix(items)), dtype=DTYPE)
    logger.debug("index built: %d items, dim %d, metric %s", len(items), V.shape[-1], metric)
    return EmbeddingIndex(
        tuple(it.id for it in items),
        V,
        metric,
        tuple(it.style for it in items),
        tuple(it.furniture_type for it in items),
    )


# -------------------------
# Queries
# -------------------------
class Hit(NamedTuple):
    id: str
    score: float


@dataclass
class QueryResult:
    hits: List[Hit]
    truncated: bool = False

    @property
    def ids(self) -> List[str]:
        return [h.id for h in self.hits]


def _query_vector(index: EmbeddingIndex, q, what: str) -> np.ndarray:
    q = np.asarray(q, dtype=DTYPE).reshape(-1)
    if q.size != index.dim:
        raise ShapeError(f"{what}: query dim {q.size} != index dim {index.dim}")
    return q


def query_compatible(
    index: EmbeddingIndex,
    query_embedding,
    k: int,
    exclude_type: Optional[int] = None,
    exclude_ids: Sequence[str] = (),
) -> QueryResult:
    """
    k nearest items to the query. exclude_type drops items of that furniture
    type (cross-type compatibility search); exclude_ids drops e.g. the query itself.
    """
    if int(k) < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    q = _query_vector(index, query_embedding, "query_compatible")
    if index.metric == "euclidean":
        scores = np.sqrt(np.sum((index.vectors - q) ** 2, axis=1))
        key = scores
    else:
        scores = index.vectors @ q
        key = -scores

    keep = np.ones(len(index), dtype=bool)
    if exclude_type is not None:
        keep &= np.asarray(index.types) != int(exclude_type)
    if exclude_ids:
        keep &= ~np.isin(np.asarray(index.ids), list(exclude_ids))
    rows = np.flatnonzero(keep)
    ids = np.asarray(index.ids)[rows]
    order = rows[np.lexsort((ids, key[rows]))]
    top = order[: int(k)]
    return QueryResult([Hit(index.ids[r], float(scores[r])) for r in top], truncated=int(k) > rows.size)


def query_with_text(
    index_joint: EmbeddingIndex,
    x_I,
    x_T,
    k: int,
    exclude_type: Optional[int] = None,
    exclude_ids: Sequence[str] = (),
) -> QueryResult:
    """Rank joint-space items by dot similarity to x_sum = x_I + x_T."""
    if index_joint.metric != "dot":
        raise ContractError("query_with_text needs an index built with the 'dot' metric")
    x_sum = _query_vector(index_joint, x_I, "query_with_text[x_I]") + _query_vector(
        index_joint, x_T, "query_with_text[x_T]"
    )
    return query_compatible(index_joint, x_sum, k, exclude_type, exclude_ids)


# -------------------------
# Joint-space helpers
# -------------------------
def joint_embedder(params: ModelParameters, config: ModelConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Feature matrix -> x_I rows, for a checkpoint holding base and joint parameters."""
    return lambda X: project_joint(visual_features(X, params, config), "visual", params).values.copy()


def text_vector(tokens: Sequence[int], params: ModelParameters, config: ModelConfig) -> np.ndarray:
    return project_joint(text_encode(tokens, params, config), "text", params).values.copy()


# -------------------------
# Recall
# -------------------------
def style_recall_at_k(
    index: EmbeddingIndex,
    ks: Sequence[int] = (1, 5, 10),
    exclude_type: bool = False,
    queries: Optional[Sequence[str]] = None,
) -> Dict[int, float]:
    """
    Every queried item searches the rest of the index; relevant items share
    its style (and, with exclude_type, have a different furniture type).
    """
    queries = list(index.ids) if queries is None else list(queries)
    k_max = max(int(k) for k in ks)
    ranked: List[List[str]] = []
    relevant: List[set] = []
    for qid in queries:
        r = index.row(qid)
        rel = {
            index.ids[j]
            for j in range(len(index))
            if j != r and index.styles[j] == index.styles[r] and (not exclude_type or index.types[j] != index.types[r])
        }
        if not rel:
            continue
        res = query_compatible(
            index, index.vectors[r], k_max, exclude_type=index.types[r] if exclude_type else None, exclude_ids=[qid]
        )
        ranked.append(res.ids)
        relevant.append(rel)
    if not ranked:
        raise MetricError("style_recall_at_k: no query has a relevant item")
    return {int(k): recall_at_k(ranked, relevant, int(k)) for k in ks}


@dataclass(frozen=True)
class TextQuery:
    """Image of item `id` plus a text naming the wanted furniture type."""

    id: str
    x_I: np.ndarray
    x_T: np.ndarray
    style: int
    furniture_type: int


def text_constrained_recall(
    index_joint: EmbeddingIndex,
    queries: Sequence[TextQuery],
    ks: Sequence[int] = (1, 3, 5, 10),
) -> Dict[str, Dict[int, float]]:
    """Recall@K of the query image's style, of the text's furniture type, and of both."""
    if not queries:
        raise MetricError("text_constrained_recall: no queries")
    k_max = max(int(k) for k in ks)
    styles = np.asarray(index_joint.styles)
    types = np.asarray(index_joint.types)
    ids = np.asarray(index_joint.ids)
    ranked: List[List[str]] = []
    rel: Dict[str, List[set]] = {"style": [], "type": [], "both": []}
    for q in queries:
        res = query_with_text(index_joint, q.x_I, q.x_T, k_max, exclude_ids=[q.id])
        ranked.append(res.ids)
        rel["style"].append(set(ids[styles == q.style]) - {q.id})
        rel["type"].append(set(ids[types == q.furniture_type]) - {q.id})
        rel["both"].append(set(ids[(styles == q.style) & (types == q.furniture_type)]) - {q.id})
    out: Dict[str, Dict[int, float]] = {}
    for name, sets in rel.items():
        usable = [(r, s) for r, s in zip(ranked, sets) if s]
        if not usable:
            logger.warning("text_constrained_recall: no query has a relevant '%s' item", name)
            continue
        out[name] = {int(k): recall_at_k([r for r, _ in usable], [s for _, s in usable], int(k)) for k in ks}
    return out


# -------------------------
# Persistence
# -------------------------
def save_index(path: Path, index: EmbeddingIndex, extras: Optional[Dict[str, object]] = None) -> None:
    meta = {
        "format": INDEX_FORMAT,
        "metric": index.metric,
        "ids": list(index.ids),
        "styles": list(index.styles),
        "types": list(index.types),
        "extras": extras or {},
    }
    save_container(path, {"vectors": np.asarray(index.vectors)}, meta)


def load_index(path: Path) -> EmbeddingIndex:
    arrays, meta = load_container(path)
    if meta.get("format") != INDEX_FORMAT:
        raise InputError(f"{path}: format tag {meta.get('format')!r}, expected {INDEX_FORMAT!r}")
    if "vectors" not in arrays:
        raise InputError(f"{path}: missing 'vectors' entry")
    return EmbeddingIndex(
        tuple(meta["ids"]), arrays["vectors"], meta["metric"], tuple(meta["styles"]), tuple(meta["types"])
    )


def write_query_results(path: Path, result: QueryResult) -> None:
    path = Path(path)
    ensure_parent(path)
    lines = [f"{rank}\t{h.id}\t{h.score:.9g}" for rank, h in enumerate(result.hits, start=1)]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
