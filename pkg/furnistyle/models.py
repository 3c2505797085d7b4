# furnistyle/models.py
"""
Trainable networks, all built from autodiff ops:

    base       : fully connected tanh layers (stand-in for a pretrained CNN)
    E          : linear embedding layer on top of the base
    short      : base truncated after `short_truncate_at` layers, mean-pooled
                 over fixed groups of `short_pool` units, then its own E
    C          : style soft-max classifier head on the base output
    text       : token table + 1-layer LSTM, final hidden state
    joint      : linear projections of visual / text features

Parameter init: Glorot-uniform weights, zero biases, LSTM forget bias 1.0.
Every parameter draws from its own named RNG sub-stream, so the base and E
of different variants start identical for the same seed.
"""

from __future__ import annotations
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DTYPE, NUM_STYLES, NUM_TYPES, named_rng
from .errors import ConfigError, InputError, ShapeError

SIAMESE_VARIANTS = ("canonical", "short", "categorical", "baseline")
LSTM_GATES = ("i", "f", "o", "c")


# -------------------------
# Config
# -------------------------
@dataclass
class ModelConfig:
    input_dim: int = 64
    base_layers: List[int] = field(default_factory=lambda: [128, 64])
    short_truncate_at: Optional[int] = None
    short_pool: int = 2
    embedding_dim: int = 256
    num_styles: int = NUM_STYLES
    num_types: int = NUM_TYPES
    text_vocab_size: int = 128
    token_embed_dim: int = 300
    lstm_hidden: int = 300
    joint_dim: int = 256

    def validate(self) -> "ModelConfig":
        for name in (
            "input_dim",
            "short_pool",
            "embedding_dim",
            "num_styles",
            "num_types",
            "text_vocab_size",
            "token_embed_dim",
            "lstm_hidden",
            "joint_dim",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if not self.base_layers or any(int(w) < 1 for w in self.base_layers):
            raise ConfigError(f"model.base_layers must be non-empty positive widths, got {self.base_layers}")
        k = self.short_truncate_at
        if k is not None:
            if not 1 <= int(k) < len(self.base_layers):
                raise ConfigError(
                    f"model.short_truncate_at must be in [1, {len(self.base_layers)}), got {k}"
                )
            width = self.base_layers[int(k) - 1]
            if width % int(self.short_pool) != 0:
                raise ConfigError(
                    f"model.short_pool={self.short_pool} does not divide layer width {width}"
                )
        return self

    @property
    def base_out_dim(self) -> int:
        return int(self.base_layers[-1])

    @property
    def short_out_dim(self) -> int:
        if self.short_truncate_at is None:
            raise ConfigError("model.short_truncate_at is not set")
        return int(self.base_layers[int(self.short_truncate_at) - 1]) // int(self.short_pool)


# -------------------------
# Parameters
# -------------------------
class ModelParameters(dict):
    """Named trainable tensors. Names are dotted: base.0.W, E.b, lstm.U_f, ..."""

    def names(self, prefixes: Iterable[str] = ()) -> List[str]:
        prefixes = tuple(prefixes)
        return sorted(n for n in self if not prefixes or n.startswith(prefixes))

    def count(self, prefixes: Iterable[str] = ()) -> int:
        return int(np.sum([self[n].values.size for n in self.names(prefixes)]))

    def fingerprint(self, prefixes: Iterable[str] = ()) -> str:
        h = hashlib.sha256()
        for n in self.names(prefixes):
            h.update(n.encode("utf-8"))
            h.update(np.ascontiguousarray(self[n].values).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParameters":
        return ModelParameters({n: ad.parameter(t.values.copy()) for n, t in self.items()})

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def merged(self, other: "ModelParameters") -> "ModelParameters":
        out = ModelParameters(self)
        out.update(other)
        return out


def _glorot(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    s = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-s, s, size=shape).astype(DTYPE)


def param_shapes(config: ModelConfig, variant: str) -> Dict[str, Tuple[int, int]]:
    """Shapes of every trainable tensor for a variant (siamese variants or 'vte')."""
    shapes: Dict[str, Tuple[int, int]] = {}
    if variant == "vte":
        H, Dt = config.lstm_hidden, config.token_embed_dim
        shapes["text.table"] = (config.text_vocab_size, Dt)
        for g in LSTM_GATES:
            shapes[f"lstm.W_{g}"] = (Dt, H)
            shapes[f"lstm.U_{g}"] = (H, H)
            shapes[f"lstm.b_{g}"] = (1, H)
        shapes["visual_proj"] = (config.base_out_dim, config.joint_dim)
        shapes["text_proj"] = (H, config.joint_dim)
        return shapes
    if variant not in SIAMESE_VARIANTS:
        raise ConfigError(f"unknown model variant '{variant}'")

    n_layers = len(config.base_layers)
    if variant == "short":
        if config.short_truncate_at is None:
            raise ConfigError("variant 'short' requires model.short_truncate_at")
        n_layers = int(config.short_truncate_at)
    fan_in = config.input_dim
    for l in range(n_layers):
        width = int(config.base_layers[l])
        shapes[f"base.{l}.W"] = (fan_in, width)
        shapes[f"base.{l}.b"] = (1, width)
        fan_in = width
    if variant in ("canonical", "categorical", "short"):
        e_in = config.short_out_dim if variant == "short" else config.base_out_dim
        shapes["E.W"] = (e_in, config.embedding_dim)
        shapes["E.b"] = (1, config.embedding_dim)
    if variant in ("categorical", "baseline"):
        shapes["C.W"] = (config.base_out_dim, config.num_styles)
        shapes["C.b"] = (1, config.num_styles)
    return shapes


def init_params(config: ModelConfig, variant: str, seed: int) -> ModelParameters:
    config.validate()
    params = ModelParameters()
    for name, shape in param_shapes(config, variant).items():
        if name.endswith(".b") or name.startswith("lstm.b_"):
            fill = 1.0 if name == "lstm.b_f" else 0.0
            params[name] = ad.parameter(np.full(shape, fill, dtype=DTYPE))
        else:
            params[name] = ad.parameter(_glorot(named_rng(seed, f"init/{name}"), shape))
    return params


def param_count(config: ModelConfig, variant: str) -> int:
    return int(np.sum([a * b for a, b in param_shapes(config, variant).values()]))


# -------------------------
# Building blocks
# -------------------------
def _rows(x, width: int, what: str) -> Tensor:
    """Accept a vector, a row matrix or a Tensor and return an (N, width) tensor."""
    if isinstance(x, Tensor):
        t = x if x.values.ndim == 2 else ad.reshape(x, (1, -1))
    else:
        arr = np.asarray(x, dtype=DTYPE)
        t = ad.constant(arr.reshape(1, -1) if arr.ndim == 1 else arr)
    if t.values.ndim != 2 or t.shape[1] != width:
        raise ShapeError(f"{what}: expected width {width}, got shape {t.shape}")
    return t


def linear(h: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = h @ W
    if b is None:
        return out
    ones = ad.constant(np.ones((h.shape[0], 1), dtype=DTYPE))
    return out + ones @ b


def base_forward(X: Tensor, params: ModelParameters, n_layers: int) -> Tensor:
    h = X
    for l in range(n_layers):
        h = ad.tanh(linear(h, params[f"base.{l}.W"], params[f"base.{l}.b"]))
    return h


def _pool_matrix(width: int, group: int) -> Tensor:
    P = np.zeros((width, width // group), dtype=DTYPE)
    for j in range(width // group):
        P[j * group : (j + 1) * group, j] = 1.0 / group
    return ad.constant(P)


def _as_vector(t: Tensor) -> Tensor:
    return ad.reshape(t, (t.shape[1],)) if t.shape[0] == 1 else t


# -------------------------
# Visual path
# -------------------------
def embed_batch(X, params: ModelParameters, config: ModelConfig) -> Tensor:
    X = _rows(X, config.input_dim, "embed")
    h = base_forward(X, params, len(config.base_layers))
    return linear(h, params["E.W"], params["E.b"])


def embed(item_features, params: ModelParameters, config: ModelConfig) -> Tensor:
    """x = E(base(features)) for one item, shape (D,)."""
    return _as_vector(embed_batch(_rows(item_features, config.input_dim, "embed"), params, config))


def embed_short_batch(X, params: ModelParameters, config: ModelConfig) -> Tensor:
    if config.short_truncate_at is None:
        raise ConfigError("embed_short requires model.short_truncate_at")
    X = _rows(X, config.input_dim, "embed_short")
    k = int(config.short_truncate_at)
    h = base_forward(X, params, k)
    pooled = h @ _pool_matrix(int(config.base_layers[k - 1]), int(config.short_pool))
    return linear(pooled, params["E.W"], params["E.b"])


def embed_short(item_features, params: ModelParameters, config: ModelConfig) -> Tensor:
    return _as_vector(embed_short_batch(item_features, params, config))


def classify_batch(X, params: ModelParameters, config: ModelConfig) -> Tensor:
    X = _rows(X, config.input_dim, "classify")
    h = base_forward(X, params, len(config.base_layers))
    return ad.softmax(linear(h, params["C.W"], params["C.b"]))


def classify(item_features, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Style probability vector, shape (num_styles,)."""
    return _as_vector(classify_batch(item_features, params, config))


def embed_and_classify_batch(X, params: ModelParameters, config: ModelConfig) -> Tuple[Tensor, Tensor]:
    """One base pass feeding both heads (categorical training)."""
    X = _rows(X, config.input_dim, "embed_and_classify")
    h = base_forward(X, params, len(config.base_layers))
    return linear(h, params["E.W"], params["E.b"]), ad.softmax(linear(h, params["C.W"], params["C.b"]))


def visual_features(X, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Full base output, the frozen visual feature the joint embedding projects."""
    X = _rows(X, config.input_dim, "visual_features")
    return base_forward(X, params, len(config.base_layers))


def embedder_for(variant: str, config: ModelConfig) -> Callable[[object, ModelParameters], Tensor]:
    """Row-batch embedding function used for distances of a siamese variant."""
    if variant in ("canonical", "categorical"):
        return lambda X, p: embed_batch(X, p, config)
    if variant == "short":
        return lambda X, p: embed_short_batch(X, p, config)
    if variant == "baseline":
        return lambda X, p: visual_features(X, p, config)
    raise ConfigError(f"unknown model variant '{variant}'")


def embed_numpy(variant: str, X: np.ndarray, params: ModelParameters, config: ModelConfig) -> np.ndarray:
    return embedder_for(variant, config)(np.asarray(X, dtype=DTYPE), params).values.copy()


# -------------------------
# Text path
# -------------------------
def _check_tokens(tokens: Sequence[int], config: ModelConfig) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size == 0:
        raise InputError("text_encode: empty token sequence")
    bad = toks[(toks < 0) | (toks >= config.text_vocab_size)]
    if bad.size:
        raise InputError(
            f"text_encode: token {int(bad[0])} outside vocabulary [0, {config.text_vocab_size})"
        )
    return toks


def _lstm_run(token_rows: np.ndarray, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Run the LSTM over a (B, T) block of equal-length sequences; returns h_T (B, H)."""
    B, T = token_rows.shape
    H, V = config.lstm_hidden, config.text_vocab_size
    ones = ad.constant(np.ones((B, 1), dtype=DTYPE))
    h = ad.constant(np.zeros((B, H), dtype=DTYPE))
    c = ad.constant(np.zeros((B, H), dtype=DTYPE))

    def gate(x: Tensor, g: str) -> Tensor:
        return x @ params[f"lstm.W_{g}"] + h @ params[f"lstm.U_{g}"] + ones @ params[f"lstm.b_{g}"]

    for t in range(T):
        onehot = np.zeros((B, V), dtype=DTYPE)
        onehot[np.arange(B), token_rows[:, t]] = 1.0
        x = ad.constant(onehot) @ params["text.table"]
        i = ad.sigmoid(gate(x, "i"))
        f = ad.sigmoid(gate(x, "f"))
        o = ad.sigmoid(gate(x, "o"))
        cand = ad.tanh(gate(x, "c"))
        c = ad.mul(f, c) + ad.mul(i, cand)
        h = ad.mul(o, ad.tanh(c))
    return h


def text_encode_batch(sequences: Sequence[Sequence[int]], params: ModelParameters, config: ModelConfig) -> Tensor:
    """Final LSTM hidden state per sequence, shape (B, lstm_hidden)."""
    seqs = [_check_tokens(s, config) for s in sequences]
    if not seqs:
        raise InputError("text_encode: no sequences")
    lengths = np.array([s.size for s in seqs])
    order = np.argsort(lengths, kind="stable")
    blocks: List[Tensor] = []
    placed: List[int] = []
    for L in np.unique(lengths):
        idx = [int(i) for i in order if lengths[i] == L]
        blocks.append(_lstm_run(np.stack([seqs[i] for i in idx]), params, config))
        placed.extend(idx)
    if len(blocks) == 1:
        return blocks[0]
    stacked = ad.concat(blocks, axis=0)
    # permutation back to input order
    P = np.zeros((len(seqs), len(seqs)), dtype=DTYPE)
    P[placed, np.arange(len(seqs))] = 1.0
    return ad.constant(P) @ stacked


def text_encode(tokens: Sequence[int], params: ModelParameters, config: ModelConfig) -> Tensor:
    return _as_vector(text_encode_batch([tokens], params, config))


# -------------------------
# Joint space
# -------------------------
def project_joint(x, which: str, params: ModelParameters) -> Tensor:
    """Linear projection into the joint space: x_I (which='visual') or x_T ('text')."""
    if which not in ("visual", "text"):
        raise ConfigError(f"project_joint: which must be 'visual' or 'text', got '{which}'")
    W = params["visual_proj" if which == "visual" else "text_proj"]
    was_vector = (x.values if isinstance(x, Tensor) else np.asarray(x)).ndim == 1
    rows = _rows(x, W.shape[0], f"project_joint[{which}]")
    out = rows @ W
    return _as_vector(out) if was_vector else out
