# furnistyle/sampling.py
"""
Strategic pair sampling and VTE batch construction.

Positive pairs: same style, different furniture type, same split.
Negative pairs: different style, any furniture types, same split.
Pairs are canonicalised as (smaller id, larger id); no pair is emitted twice.
"""

from __future__ import annotations
import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .config import NEG_RATIO, VTE_NEGATIVES, named_rng
from .dataset import ItemRecord, PairSample
from .errors import ConfigError, SamplingError

logger = logging.getLogger(__name__)

# Above this share of all valid negatives, enumerate instead of rejection-sample.
_ENUMERATE_SHARE = 0.5


def _split_name(split: Optional[str]) -> str:
    return split if split is not None else "unsplit"


def _group_by_split(items: Sequence[ItemRecord]) -> Dict[Optional[str], List[ItemRecord]]:
    groups: Dict[Optional[str], List[ItemRecord]] = defaultdict(list)
    for it in items:
        groups[it.split].append(it)
    return {k: sorted(v, key=lambda r: r.id) for k, v in sorted(groups.items(), key=lambda kv: _split_name(kv[0]))}


def _check_feasible(split: Optional[str], group: Sequence[ItemRecord]) -> None:
    styles: Dict[int, Set[int]] = defaultdict(set)
    for it in group:
        styles[it.style].add(it.furniture_type)
    if len(styles) < 2:
        raise SamplingError(
            f"split '{_split_name(split)}' holds a single style ({next(iter(styles), 'none')}); no negatives possible"
        )
    for style in sorted(styles):
        if len(styles[style]) < 2:
            raise SamplingError(
                f"style {style} in split '{_split_name(split)}' has only furniture type "
                f"{next(iter(styles[style]))}; no positive pair possible"
            )


def positive_candidates(group: Sequence[ItemRecord]) -> List[Tuple[str, str]]:
    """All (id, id) same-style different-type pairs of one split, canonical order."""
    by_style: Dict[int, List[ItemRecord]] = defaultdict(list)
    for it in group:
        by_style[it.style].append(it)
    out: List[Tuple[str, str]] = []
    for style in sorted(by_style):
        members = sorted(by_style[style], key=lambda r: r.id)
        types = np.array([m.furniture_type for m in members])
        a, b = np.triu_indices(len(members), k=1)
        keep = types[a] != types[b]
        out.extend((members[i].id, members[j].id) for i, j in zip(a[keep], b[keep]))
    return out


def _negative_count(group: Sequence[ItemRecord]) -> int:
    n = len(group)
    counts = np.bincount([it.style for it in group])
    return int(n * (n - 1) // 2 - np.sum(counts * (counts - 1) // 2))


def _negatives_enumerated(group: Sequence[ItemRecord]) -> List[Tuple[str, str]]:
    styles = np.array([it.style for it in group])
    a, b = np.triu_indices(len(group), k=1)
    keep = styles[a] != styles[b]
    return [(group[i].id, group[j].id) for i, j in zip(a[keep], b[keep])]


def strategic_pairs(
    items: Sequence[ItemRecord],
    n_positive: int,
    neg_ratio: int = NEG_RATIO,
    seed: int = 0,
) -> List[PairSample]:
    """
    Exactly n_positive positives and n_positive * neg_ratio negatives.

    Pairs never cross splits. Positives are drawn without replacement from
    every valid within-split positive; negatives uniformly from every
    within-split pair of differing styles.
    """
    if n_positive < 1:
        raise ConfigError(f"n_positive must be >= 1, got {n_positive}")
    if neg_ratio < 0:
        raise ConfigError(f"neg_ratio must be >= 0, got {neg_ratio}")
    groups = _group_by_split(items)
    if not groups:
        raise SamplingError("no items to sample pairs from")
    for split, group in groups.items():
        _check_feasible(split, group)

    rng = named_rng(seed, "sampling")

    positives: List[Tuple[str, str]] = []
    for group in groups.values():
        positives.extend(positive_candidates(group))
    if n_positive > len(positives):
        raise SamplingError(f"requested {n_positive} positive pairs but only {len(positives)} distinct ones exist")
    picks = np.sort(rng.choice(len(positives), size=n_positive, replace=False))
    out = [PairSample(*positives[k], 1) for k in picks]

    n_negative = n_positive * int(neg_ratio)
    split_keys = list(groups)
    totals = np.array([_negative_count(groups[k]) for k in split_keys], dtype=np.int64)
    if n_negative > int(totals.sum()):
        raise SamplingError(f"requested {n_negative} negative pairs but only {int(totals.sum())} distinct ones exist")
    if n_negative == 0:
        return out

    if n_negative > _ENUMERATE_SHARE * totals.sum():
        pool: List[Tuple[str, str]] = []
        for k in split_keys:
            pool.extend(_negatives_enumerated(groups[k]))
        picks = np.sort(rng.choice(len(pool), size=n_negative, replace=False))
        out.extend(PairSample(*pool[k], 0) for k in picks)
        return out

    # rejection sampling: split by its share of negatives, then a uniform item pair
    weights = totals / totals.sum()
    seen: Set[Tuple[str, str]] = set()
    while len(seen) < n_negative:
        group = groups[split_keys[int(rng.choice(len(split_keys), p=weights))]]
        a, b = rng.choice(len(group), size=2, replace=False)
        ia, ib = group[int(a)], group[int(b)]
        if ia.style == ib.style:
            continue
        pair = PairSample.canonical(ia.id, ib.id, 0)
        key = (pair.i, pair.j)
        if key in seen:
            continue
        seen.add(key)
        out.append(pair)
    logger.debug("sampled %d positive / %d negative pairs", n_positive, n_negative)
    return out


def vte_batch(
    items: Sequence[ItemRecord],
    reference_id: str,
    seed: int,
    n_negatives: int = VTE_NEGATIVES,
) -> Tuple[ItemRecord, List[ItemRecord]]:
    """Reference item plus n_negatives distinct items of other styles from its split."""
    ref = next((it for it in items if it.id == reference_id), None)
    if ref is None:
        raise SamplingError(f"reference id '{reference_id}' not in items")
    pool = sorted(
        (it for it in items if it.style != ref.style and it.split == ref.split),
        key=lambda r: r.id,
    )
    if len(pool) < n_negatives:
        raise SamplingError(
            f"reference '{reference_id}' (style {ref.style}) has {len(pool)} differing-style items, "
            f"needs {n_negatives}"
        )
    rng = named_rng(seed, f"vte/{reference_id}")
    picks = rng.choice(len(pool), size=n_negatives, replace=False)
    return ref, [pool[int(k)] for k in picks]


def vte_batches(
    items: Sequence[ItemRecord],
    n_batches: int,
    seed: int,
    stream: str = "vte_references",
    n_negatives: int = VTE_NEGATIVES,
) -> List[Tuple[ItemRecord, List[ItemRecord]]]:
    """n_batches VTE batches with references drawn uniformly from `items`."""
    ordered = sorted(items, key=lambda r: r.id)
    if not ordered:
        raise SamplingError("no items to build VTE batches from")
    rng = named_rng(seed, stream)
    out = []
    for _ in range(n_batches):
        ref = ordered[int(rng.integers(len(ordered)))]
        batch_seed = int(rng.integers(2**62))
        out.append(vte_batch(ordered, ref.id, seed=batch_seed, n_negatives=n_negatives))
    return out


def vte_feasible(items: Sequence[ItemRecord], n_negatives: int = VTE_NEGATIVES) -> bool:
    """True when every item can serve as a VTE reference within its split."""
    by_split: Dict[Optional[str], List[int]] = defaultdict(list)
    for it in items:
        by_split[it.split].append(it.style)
    for styles in by_split.values():
        counts = np.bincount(styles)
        if len(styles) - counts[counts > 0].max() < n_negatives:
            return False
    return bool(items)
