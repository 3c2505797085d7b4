# furnistyle/losses.py
"""
Training objectives and the distance / similarity measures they use.

    contrastive : Y * 1/2 d^2 + (1 - Y) * 1/2 max(0, m - d)^2,  d = ||x_i - x_j||_2
    categorical : contrastive + CE(i) + CE(j)  (unweighted)
    hinge rank  : sum_wrong max(0, m - S(I, T_correct) + S(I, T_wrong)),  S = dot

Every function accepts a single pair (vectors) or a minibatch (row
matrices) and returns a scalar Tensor averaged over rows.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DTYPE
from .errors import ConfigError, ContractError, InputError, ShapeError

ArrayLike = Union[Tensor, np.ndarray, Sequence[float]]

PROB_FLOOR = 1e-12


# -------------------------
# Config
# -------------------------
@dataclass
class LossConfig:
    m_contrastive: float = 50.0
    m_rank: float = 0.1

    def validate(self) -> "LossConfig":
        for name in ("m_contrastive", "m_rank"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"loss.{name} must be > 0, got {getattr(self, name)}")
        return self


def _t(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=DTYPE))


def _labels(Y, n_rows: int | None) -> np.ndarray:
    y = np.asarray(Y, dtype=DTYPE)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("compatibility labels must be 0 or 1")
    if n_rows is None:
        if y.size != 1:
            raise ShapeError(f"single pair expects one label, got {y.size}")
        return y.reshape(())
    if y.size == 1:
        return np.full(n_rows, float(y.reshape(-1)[0]), dtype=DTYPE)
    if y.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {y.shape}")
    return y


# -------------------------
# Distances
# -------------------------
def squared_distance(x_i: ArrayLike, x_j: ArrayLike) -> Tensor:
    a, b = _t(x_i), _t(x_j)
    if a.shape != b.shape:
        raise ShapeError(f"distance: shape mismatch {a.shape} vs {b.shape}")
    return ad.sum(ad.square(a - b), axis=-1)


def euclidean_distance(x_i: ArrayLike, x_j: ArrayLike) -> Tensor:
    """||x_i - x_j||_2 per row (scalar for two vectors)."""
    return ad.sqrt(squared_distance(x_i, x_j))


# -------------------------
# Siamese objectives
# -------------------------
def contrastive_loss(x_i: ArrayLike, x_j: ArrayLike, Y, m_contrastive: float) -> Tensor:
    a = _t(x_i)
    rows = a.shape[0] if a.values.ndim == 2 else None
    y = _labels(Y, rows)
    s = squared_distance(x_i, x_j)
    d = ad.sqrt(s)
    hinge = ad.max_with_zero(ad.constant(np.full(s.shape, float(m_contrastive), dtype=DTYPE)) - d)
    per_pair = ad.mul(ad.constant(y), s) + ad.mul(ad.constant(1.0 - y), ad.square(hinge))
    return ad.scale(ad.mean(per_pair), 0.5)


def cross_entropy(probs: ArrayLike, labels) -> Tensor:
    """Mean over rows of -log(max(p[label], 1e-12))."""
    p = _t(probs)
    k = p.shape[-1]
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any((lab < 0) | (lab >= k)):
        raise ContractError(f"class label outside [0, {k})")
    if p.values.ndim == 1:
        if lab.size != 1:
            raise ShapeError("single probability vector expects one label")
        onehot = np.zeros(k, dtype=DTYPE)
        onehot[lab[0]] = 1.0
    else:
        if lab.size != p.shape[0]:
            raise ShapeError(f"expected {p.shape[0]} labels, got {lab.size}")
        onehot = np.zeros(p.shape, dtype=DTYPE)
        onehot[np.arange(p.shape[0]), lab] = 1.0
    logp = ad.log(ad.clamp_min(p, PROB_FLOOR))
    picked = ad.sum(ad.mul(logp, ad.constant(onehot)), axis=-1)
    return -ad.mean(picked)


def categorical_loss(
    x_i: ArrayLike,
    x_j: ArrayLike,
    Y,
    probs_i: ArrayLike,
    label_i,
    probs_j: ArrayLike,
    label_j,
    m_contrastive: float,
) -> Tensor:
    return (
        contrastive_loss(x_i, x_j, Y, m_contrastive)
        + cross_entropy(probs_i, label_i)
        + cross_entropy(probs_j, label_j)
    )


# -------------------------
# Joint embedding objective
# -------------------------
def dot_similarity(x_I: ArrayLike, x_T: ArrayLike) -> Tensor:
    a, b = _t(x_I), _t(x_T)
    if a.shape != b.shape:
        raise ShapeError(f"dot_similarity: shape mismatch {a.shape} vs {b.shape}")
    if a.values.ndim == 1:
        return ad.dot(a, b)
    return ad.sum(ad.mul(a, b), axis=-1)


def hinge_rank_loss(
    x_I: ArrayLike,
    x_T_correct: ArrayLike,
    x_T_wrong: Sequence[ArrayLike],
    m_rank: float,
) -> Tensor:
    if len(x_T_wrong) == 0:
        raise InputError("hinge_rank_loss: wrong-text list is empty")
    correct = dot_similarity(x_I, x_T_correct)
    margin = ad.constant(np.full(correct.shape, float(m_rank), dtype=DTYPE))
    terms = [ad.max_with_zero(margin - correct + dot_similarity(x_I, w)) for w in x_T_wrong]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.mean(total) if total.values.ndim else total


def vte_batch_loss(
    X_I: Tensor,
    X_T: Tensor,
    m_rank: float,
    wrong_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Hinge rank loss over stacked VTE batches. Row r of X_I is an anchor
    image whose correct text is row r of X_T; wrong_mask[r, c] = 1 marks
    text c as a wrong text for anchor r (default: every other row).
    Averaged over anchors that have at least one wrong text.
    """
    if X_I.shape != X_T.shape or X_I.values.ndim != 2:
        raise ShapeError(f"vte_batch_loss: expected equal (B, J) inputs, got {X_I.shape} and {X_T.shape}")
    B = X_I.shape[0]
    mask = 1.0 - np.eye(B, dtype=DTYPE) if wrong_mask is None else np.asarray(wrong_mask, dtype=DTYPE).copy()
    if mask.shape != (B, B):
        raise ShapeError(f"vte_batch_loss: wrong_mask shape {mask.shape}, expected {(B, B)}")
    np.fill_diagonal(mask, 0.0)
    anchors = int(np.count_nonzero(mask.sum(axis=1)))
    if anchors == 0:
        raise InputError("vte_batch_loss: no anchor has a wrong text")
    S = X_I @ ad.transpose(X_T)
    correct = ad.reshape(ad.sum(ad.mul(X_I, X_T), axis=1), (B, 1))
    C = correct @ ad.constant(np.ones((1, B), dtype=DTYPE))
    hinge = ad.max_with_zero(ad.constant(np.full((B, B), float(m_rank), dtype=DTYPE)) - C + S)
    return ad.scale(ad.sum(ad.mul(hinge, ad.constant(mask))), 1.0 / anchors)


def style_wrong_mask(styles: Sequence[int], groups: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    wrong_mask for vte_batch_loss: text c is wrong for anchor r when the
    two rows have different styles (and sit in the same batch group).
    """
    s = np.asarray(styles).reshape(-1)
    mask = s[:, None] != s[None, :]
    if groups is not None:
        g = np.asarray(groups).reshape(-1)
        mask &= g[:, None] == g[None, :]
    return mask.astype(DTYPE)
