# furnistyle/synthetic.py
"""
Desk-scale datasets with planted style structure.

features = style_signal * P_style[s] + type_signal * P_type[t] + N(0, noise_sigma^2)

P_style and P_type rows are unit-norm Gaussian directions. Each item's
tokens are (color, material, type word, style word), so the text carries
style information through the style word only.
"""

from __future__ import annotations
import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import cv2
import numpy as np

from .config import DTYPE, NUM_STYLES, NUM_TYPES, named_rng
from .dataset import ItemRecord
from .errors import ConfigError

logger = logging.getLogger(__name__)

IMAGE_GRID = 8
IMAGE_SCALE = 100.0


# -------------------------
# Generator settings
# -------------------------
@dataclass
class SynthSpec:
    num_styles: int = NUM_STYLES
    num_types: int = NUM_TYPES
    items_per_cell: int = 10
    feature_dim: int = 64
    style_signal: float = 3.0
    type_signal: float = 1.0
    noise_sigma: float = 0.3
    words_per_style: int = 3
    num_colors: int = 8
    num_materials: int = 8
    image_size: int = 64
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if int(self.num_styles) < 2:
            raise ConfigError(f"synth.num_styles must be >= 2, got {self.num_styles}")
        if int(self.num_types) < 2:
            raise ConfigError(f"synth.num_types must be >= 2, got {self.num_types}")
        for name in ("items_per_cell", "feature_dim", "words_per_style", "num_colors", "num_materials"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"synth.{name} must be >= 1, got {getattr(self, name)}")
        if int(self.image_size) < IMAGE_GRID:
            raise ConfigError(f"synth.image_size must be >= {IMAGE_GRID}, got {self.image_size}")
        for name in ("style_signal", "type_signal", "noise_sigma"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"synth.{name} must be >= 0, got {getattr(self, name)}")
        if int(self.seed) < 0:
            raise ConfigError(f"synth.seed must be >= 0, got {self.seed}")
        return self


# -------------------------
# Vocabulary
# -------------------------
@dataclass(frozen=True)
class Vocabulary:
    """Token id layout: style words | type words | colors | materials."""

    num_styles: int
    words_per_style: int
    num_types: int
    num_colors: int
    num_materials: int

    @property
    def size(self) -> int:
        return self.num_styles * self.words_per_style + self.num_types + self.num_colors + self.num_materials

    def style_word(self, style: int, k: int) -> int:
        return style * self.words_per_style + k

    def type_word(self, furniture_type: int) -> int:
        return self.num_styles * self.words_per_style + furniture_type

    def color(self, k: int) -> int:
        return self.type_word(self.num_types) + k

    def material(self, k: int) -> int:
        return self.color(self.num_colors) + k

    def style_of_token(self, token: int) -> int | None:
        return token // self.words_per_style if 0 <= token < self.num_styles * self.words_per_style else None


def build_vocabulary(spec: SynthSpec) -> Vocabulary:
    return Vocabulary(spec.num_styles, spec.words_per_style, spec.num_types, spec.num_colors, spec.num_materials)


# -------------------------
# Generation
# -------------------------
@dataclass
class SynthDataset:
    items: List[ItemRecord]
    style_prototypes: np.ndarray
    type_prototypes: np.ndarray
    vocab: Vocabulary


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    P = rng.standard_normal((n, dim))
    return (P / np.linalg.norm(P, axis=1, keepdims=True)).astype(DTYPE)


def item_id(style: int, furniture_type: int, k: int) -> str:
    return f"s{style:02d}-t{furniture_type}-{k:04d}"


def prototypes(spec: SynthSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Unit style and type prototype rows (num_styles x D, num_types x D)."""
    rng = named_rng(spec.seed, "prototypes")
    return _unit_rows(rng, spec.num_styles, spec.feature_dim), _unit_rows(rng, spec.num_types, spec.feature_dim)


def generate(spec: SynthSpec) -> SynthDataset:
    spec.validate()
    P_style, P_type = prototypes(spec)
    noise_rng = named_rng(spec.seed, "noise")
    token_rng = named_rng(spec.seed, "tokens")
    vocab = build_vocabulary(spec)

    items: List[ItemRecord] = []
    for s in range(spec.num_styles):
        for t in range(spec.num_types):
            center = spec.style_signal * P_style[s] + spec.type_signal * P_type[t]
            noise = noise_rng.standard_normal((spec.items_per_cell, spec.feature_dim)) * spec.noise_sigma
            for k in range(spec.items_per_cell):
                tokens = (
                    vocab.color(int(token_rng.integers(spec.num_colors))),
                    vocab.material(int(token_rng.integers(spec.num_materials))),
                    vocab.type_word(t),
                    vocab.style_word(s, int(token_rng.integers(spec.words_per_style))),
                )
                items.append(ItemRecord(item_id(s, t, k), center + noise[k], s, t, tokens))
    logger.info(
        "generated %d items (%d styles x %d types x %d)",
        len(items),
        spec.num_styles,
        spec.num_types,
        spec.items_per_cell,
    )
    return SynthDataset(items, P_style, P_type, vocab)


def dataset_meta(spec: SynthSpec) -> Dict[str, object]:
    """Header fields written with a generated dataset."""
    return {
        "input_dim": spec.feature_dim,
        "num_styles": spec.num_styles,
        "num_types": spec.num_types,
        "vocab_size": build_vocabulary(spec).size,
        "seed": spec.seed,
    }


# -------------------------
# Images (curation tests)
# -------------------------
def _render(rng: np.random.Generator, size: int) -> np.ndarray:
    grid = rng.uniform(0.0, IMAGE_SCALE, size=(IMAGE_GRID, IMAGE_GRID))
    return cv2.resize(grid, (size, size), interpolation=cv2.INTER_NEAREST).astype(DTYPE)


def generate_images(spec: SynthSpec, items: Sequence[ItemRecord]) -> Dict[str, np.ndarray]:
    """One independent random-pattern intensity grid per item, values in [0, 100)."""
    spec.validate()
    rng = named_rng(spec.seed, "images")
    return {it.id: _render(rng, spec.image_size) for it in sorted(items, key=lambda r: r.id)}


@dataclass
class InjectedDuplicates:
    same_style: List[Tuple[str, str]]
    cross_style: List[Tuple[str, str]]
    scaled: List[Tuple[str, str]]


def inject_duplicates(
    items: Sequence[ItemRecord],
    images: Dict[str, np.ndarray],
    n_same: int,
    n_cross: int,
    n_scaled: int,
    num_styles: int,
    seed: int = 0,
) -> Tuple[List[ItemRecord], Dict[str, np.ndarray], InjectedDuplicates]:
    """
    Add copies of distinct originals:
        same_style : exact image copy, same style
        cross_style: exact image copy, labeled with another style
        scaled     : image at 2x intensity, same style
    Returns the extended items, the extended images and the (original, copy) ids.
    """
    total = n_same + n_cross + n_scaled
    if min(n_same, n_cross, n_scaled) < 0:
        raise ConfigError("duplicate counts must be >= 0")
    if total > len(items):
        raise ConfigError(f"asked for {total} duplicates of {len(items)} items")
    ordered = sorted(items, key=lambda r: r.id)
    picks = named_rng(seed, "duplicates").choice(len(ordered), size=total, replace=False)
    out_items = list(items)
    out_images = dict(images)
    truth = InjectedDuplicates([], [], [])
    for n, k in enumerate(picks):
        orig = ordered[int(k)]
        if n < n_same:
            copy = dataclasses.replace(orig, id=f"{orig.id}-dup")
            out_images[copy.id] = images[orig.id].copy()
            truth.same_style.append((orig.id, copy.id))
        elif n < n_same + n_cross:
            copy = dataclasses.replace(orig, id=f"{orig.id}-xdup", style=(orig.style + 1) % num_styles)
            out_images[copy.id] = images[orig.id].copy()
            truth.cross_style.append((orig.id, copy.id))
        else:
            copy = dataclasses.replace(orig, id=f"{orig.id}-x2")
            out_images[copy.id] = images[orig.id] * 2.0
            truth.scaled.append((orig.id, copy.id))
        out_items.append(copy)
    return out_items, out_images, truth


def plant_outliers(
    items: Sequence[ItemRecord], n: int, spec: SynthSpec, seed: int = 0
) -> Tuple[List[ItemRecord], List[str]]:
    """
    Mislabel n items: their features are redrawn from the same style but a
    different furniture type, the labeled type stays.
    """
    if not 0 <= n <= len(items):
        raise ConfigError(f"cannot plant {n} outliers among {len(items)} items")
    P_style, P_type = prototypes(spec)
    rng = named_rng(seed, "outliers")
    ordered = sorted(range(len(items)), key=lambda k: items[k].id)
    chosen = {ordered[int(k)] for k in rng.choice(len(items), size=n, replace=False)}
    out: List[ItemRecord] = []
    for k, it in enumerate(items):
        if k in chosen:
            other = (it.furniture_type + 1 + int(rng.integers(spec.num_types - 1))) % spec.num_types
            center = spec.style_signal * P_style[it.style] + spec.type_signal * P_type[other]
            it = dataclasses.replace(it, features=center + rng.standard_normal(spec.feature_dim) * spec.noise_sigma)
        out.append(it)
    planted = sorted(items[k].id for k in chosen)
    return out, planted
