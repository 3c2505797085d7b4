# furnistyle/training.py
"""
Optimizers and training loops.

Siamese schedule (train_siamese):
    stage "head"     : stage1_iterations minibatches, SGD-momentum at stage1_lr,
                       only the head is updated (E; E and C for categorical;
                       C for the classification-feature baseline)
    stage "finetune" : `epochs` passes over the pair set, every parameter,
                       SGD-momentum at stage2_lr

Joint embedding (train_vte): RMSProp on the text encoder and both
projections; the visual base is read, never written.
"""

from __future__ import annotations
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .config import DTYPE, VTE_NEGATIVES, named_rng
from .dataset import ItemRecord, PairSample, feature_matrix, items_by_id, items_in_split
from .errors import ConfigError, ContractError, InputError, NumericsError
from .evaluation import active_negative_fraction, compatibility_score, recall_at_k, roc_auc
from .losses import (
    LossConfig,
    categorical_loss,
    contrastive_loss,
    cross_entropy,
    style_wrong_mask,
    vte_batch_loss,
)
from .models import (
    SIAMESE_VARIANTS,
    ModelConfig,
    ModelParameters,
    classify_batch,
    embed_and_classify_batch,
    embedder_for,
    init_params,
    project_joint,
    text_encode_batch,
    visual_features,
)
from .sampling import vte_batches, vte_feasible
from .training_log import EpochRecord, TrainingLogger

logger = logging.getLogger(__name__)

HEAD_PREFIXES: Dict[str, Tuple[str, ...]] = {
    "canonical": ("E.",),
    "short": ("E.",),
    "categorical": ("E.", "C."),
    "baseline": ("C.",),
}
VTE_PREFIXES = ("text.", "lstm.", "visual_proj", "text_proj")


# -------------------------
# Config
# -------------------------
@dataclass
class TrainingConfig:
    stage1_lr: float = 0.01
    stage1_iterations: int = 50
    stage2_lr: float = 0.0001
    epochs: int = 8
    momentum: float = 0.9
    vte_lr: float = 0.001
    batch_size: int = 32
    seed: int = 0
    margin_candidates: List[float] = field(default_factory=lambda: [1.0, 10.0, 1000.0, 3000.0, 1e7])
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    val_subsample: int = 20000
    vte_steps_per_epoch: int = 50
    vte_batches_per_step: int = 4
    grad_clip: float = 10.0
    show_progress: bool = False

    def validate(self) -> "TrainingConfig":
        for name in ("stage1_lr", "stage2_lr", "vte_lr"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"training.{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= float(self.momentum) < 1.0:
            raise ConfigError(f"training.momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= float(self.rmsprop_decay) < 1.0:
            raise ConfigError(f"training.rmsprop_decay must be in [0, 1), got {self.rmsprop_decay}")
        if int(self.epochs) < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}")
        for name in ("stage1_iterations",):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"training.{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "val_subsample", "vte_steps_per_epoch", "vte_batches_per_step"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"training.{name} must be >= 1, got {getattr(self, name)}")
        if int(self.seed) < 0:
            raise ConfigError(f"training.seed must be >= 0, got {self.seed}")
        if any(not float(m) > 0 for m in self.margin_candidates):
            raise ConfigError("training.margin_candidates must all be > 0")
        if not float(self.grad_clip) > 0 or not float(self.rmsprop_eps) > 0:
            raise ConfigError("training.grad_clip and training.rmsprop_eps must be > 0")
        return self


# -------------------------
# Optimizers
# -------------------------
@dataclass
class OptimizerState:
    kind: str
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)


def _grad(t: ad.Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.values)


def _assign(params: ModelParameters, name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericsError(f"parameter '{name}' became non-finite")
    params[name].values = values


class SGDMomentum:
    """v <- rho * v - lr * grad ; w <- w + v"""

    def __init__(self, lr: float, momentum: float):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.state = OptimizerState("sgd_momentum")

    def step(self, params: ModelParameters, names: Sequence[str]) -> None:
        for n in names:
            t = params[n]
            v = self.state.buffers.get(n)
            if v is None:
                v = np.zeros_like(t.values)
            v = self.momentum * v - self.lr * _grad(t)
            self.state.buffers[n] = v
            _assign(params, n, t.values + v)


class RMSProp:
    """s <- decay * s + (1 - decay) * grad^2 ; w <- w - lr * grad / (sqrt(s) + eps)"""

    def __init__(self, lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.lr = float(lr)
        self.decay = float(decay)
        self.eps = float(eps)
        self.state = OptimizerState("rmsprop")

    def step(self, params: ModelParameters, names: Sequence[str]) -> None:
        for n in names:
            t = params[n]
            g = _grad(t)
            s = self.state.buffers.get(n)
            if s is None:
                s = np.zeros_like(t.values)
            s = self.decay * s + (1.0 - self.decay) * g * g
            self.state.buffers[n] = s
            _assign(params, n, t.values - self.lr * g / (np.sqrt(s) + self.eps))


# -------------------------
# Pair batches
# -------------------------
@dataclass
class PairArrays:
    A: np.ndarray
    B: np.ndarray
    Y: np.ndarray
    style_a: np.ndarray
    style_b: np.ndarray

    def __len__(self) -> int:
        return int(self.Y.size)

    def take(self, idx: np.ndarray) -> "PairArrays":
        return PairArrays(self.A[idx], self.B[idx], self.Y[idx], self.style_a[idx], self.style_b[idx])


def pair_arrays(pairs: Sequence[PairSample], by_id: Mapping[str, ItemRecord]) -> PairArrays:
    missing = next((p for p in pairs if p.i not in by_id or p.j not in by_id), None)
    if missing is not None:
        raise InputError(f"pair ({missing.i}, {missing.j}) references an id missing from the dataset")
    return PairArrays(
        A=np.stack([by_id[p.i].features for p in pairs]).astype(DTYPE),
        B=np.stack([by_id[p.j].features for p in pairs]).astype(DTYPE),
        Y=np.array([p.Y for p in pairs], dtype=DTYPE),
        style_a=np.array([by_id[p.i].style for p in pairs], dtype=np.int64),
        style_b=np.array([by_id[p.j].style for p in pairs], dtype=np.int64),
    )


def siamese_loss(
    variant: str,
    params: ModelParameters,
    model_config: ModelConfig,
    batch: PairArrays,
    m_contrastive: float,
) -> ad.Tensor:
    if variant == "categorical":
        xa, pa = embed_and_classify_batch(batch.A, params, model_config)
        xb, pb = embed_and_classify_batch(batch.B, params, model_config)
        return categorical_loss(xa, xb, batch.Y, pa, batch.style_a, pb, batch.style_b, m_contrastive)
    if variant == "baseline":
        return cross_entropy(classify_batch(batch.A, params, model_config), batch.style_a) + cross_entropy(
            classify_batch(batch.B, params, model_config), batch.style_b
        )
    emb = embedder_for(variant, model_config)
    return contrastive_loss(emb(batch.A, params), emb(batch.B, params), batch.Y, m_contrastive)


def pair_distances_for(
    variant: str,
    params: ModelParameters,
    model_config: ModelConfig,
    batch: PairArrays,
) -> np.ndarray:
    """Euclidean distance per pair in the variant's comparison space."""
    emb = embedder_for(variant, model_config)
    xa = emb(batch.A, params).values
    xb = emb(batch.B, params).values
    return np.sqrt(np.sum((xa - xb) ** 2, axis=1))


def pair_auc(variant: str, params: ModelParameters, model_config: ModelConfig, batch: PairArrays) -> float:
    d = pair_distances_for(variant, params, model_config, batch)
    return roc_auc(compatibility_score(d), batch.Y.astype(np.int64))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of minibatch index arrays, reshuffled every pass."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def clip_gradients(params: ModelParameters, names: Sequence[str], max_norm: float) -> float:
    """Rescale the gradients of `names` so their joint L2 norm is at most max_norm. Returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(_grad(params[n]) ** 2)) for n in names)))
    if not np.isfinite(norm):
        raise NumericsError("gradient norm is not finite")
    if norm > max_norm:
        scale = max_norm / norm
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * scale
    return norm


class _Stepper:
    """Runs one clipped optimizer step and tags numeric failures with the minibatch index."""

    def __init__(self, params: ModelParameters, grad_clip: float):
        self.params = params
        self.grad_clip = float(grad_clip)
        self.batch_index = 0

    def __call__(self, optimizer, names: Sequence[str], make_loss: Callable[[], ad.Tensor]) -> float:
        k = self.batch_index
        self.batch_index += 1
        try:
            self.params.zero_grad()
            loss = make_loss()
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(f"loss is {value}")
            ad.backward(loss)
            clip_gradients(self.params, names, self.grad_clip)
            optimizer.step(self.params, names)
        except NumericsError as e:
            raise NumericsError(f"minibatch {k}: {e}", batch_index=k) from e
        return value


def _emit(record: EpochRecord, records: List[EpochRecord], log: Optional[TrainingLogger]) -> None:
    records.append(record)
    logger.info(record.format())
    if log is not None:
        log.log(record)


# -------------------------
# Siamese training
# -------------------------
def train_siamese(
    variant: str,
    items: Sequence[ItemRecord],
    pairs: Sequence[PairSample],
    config: TrainingConfig,
    model_config: Optional[ModelConfig] = None,
    loss_config: Optional[LossConfig] = None,
    val_pairs: Optional[Sequence[PairSample]] = None,
    params: Optional[ModelParameters] = None,
    log: Optional[TrainingLogger] = None,
) -> Tuple[ModelParameters, List[EpochRecord]]:
    """Two-stage training of one Siamese variant. Returns the trained parameters and epoch records."""
    if variant not in SIAMESE_VARIANTS:
        raise ConfigError(f"unknown siamese variant '{variant}'")
    config.validate()
    model_config = (model_config or ModelConfig()).validate()
    loss_config = (loss_config or LossConfig()).validate()
    if not pairs:
        raise InputError("no training pairs")

    by_id = items_by_id(items)
    train = pair_arrays(pairs, by_id)
    val = None
    if val_pairs:
        chosen = list(val_pairs)
        if len(chosen) > config.val_subsample:
            rng = named_rng(config.seed, "val_subsample")
            keep = np.sort(rng.choice(len(chosen), config.val_subsample, replace=False))
            chosen = [chosen[k] for k in keep]
        val = pair_arrays(chosen, by_id)

    params = init_params(model_config, variant, config.seed) if params is None else params.copy()
    m = float(loss_config.m_contrastive)
    records: List[EpochRecord] = []

    def val_auc() -> Optional[float]:
        return pair_auc(variant, params, model_config, val) if val is not None else None

    def loss_on(idx: np.ndarray) -> Callable[[], ad.Tensor]:
        return lambda: siamese_loss(variant, params, model_config, train.take(idx), m)

    step = _Stepper(params, config.grad_clip)
    batches = _minibatches(len(train), config.batch_size, named_rng(config.seed, "minibatches"))

    _emit(EpochRecord(0, "init", None, val_auc()), records, log)

    if config.stage1_iterations > 0:
        opt = SGDMomentum(config.stage1_lr, config.momentum)
        head = params.names(HEAD_PREFIXES[variant])
        losses = [
            step(opt, head, loss_on(next(batches)))
            for _ in tqdm(range(config.stage1_iterations), desc=f"{variant}:head", disable=not config.show_progress)
        ]
        _emit(EpochRecord(0, "head", float(np.mean(losses)), val_auc()), records, log)

    opt = SGDMomentum(config.stage2_lr, config.momentum)
    every = params.names()
    per_epoch = -(-len(train) // config.batch_size)
    for epoch in tqdm(range(1, config.epochs + 1), desc=f"{variant}:finetune", disable=not config.show_progress):
        losses = [step(opt, every, loss_on(next(batches))) for _ in range(per_epoch)]
        _emit(EpochRecord(epoch, "finetune", float(np.mean(losses)), val_auc()), records, log)

    return params, records


# -------------------------
# Joint visual-text embedding
# -------------------------
def _flatten(batches: Sequence[Tuple[ItemRecord, List[ItemRecord]]]) -> Tuple[List[ItemRecord], List[int]]:
    rows: List[ItemRecord] = []
    groups: List[int] = []
    for g, (ref, negs) in enumerate(batches):
        rows.extend([ref, *negs])
        groups.extend([g] * (1 + len(negs)))
    return rows, groups


def vte_loss(
    params: ModelParameters,
    batches: Sequence[Tuple[ItemRecord, List[ItemRecord]]],
    visual: Mapping[str, np.ndarray],
    model_config: ModelConfig,
    m_rank: float,
) -> ad.Tensor:
    """Hinge rank loss over stacked VTE batches; `visual` maps id -> frozen base feature."""
    rows, groups = _flatten(batches)
    x_I = project_joint(ad.constant(np.stack([visual[r.id] for r in rows])), "visual", params)
    x_T = project_joint(text_encode_batch([r.tokens for r in rows], params, model_config), "text", params)
    mask = style_wrong_mask([r.style for r in rows], groups)
    return vte_batch_loss(x_I, x_T, m_rank, mask)


def frozen_visual_features(
    items: Sequence[ItemRecord], base: ModelParameters, model_config: ModelConfig
) -> Dict[str, np.ndarray]:
    if not items:
        return {}
    V = visual_features(feature_matrix(items), base, model_config).values
    return {it.id: V[k].copy() for k, it in enumerate(items)}


def vte_text_recall(
    items: Sequence[ItemRecord],
    params: ModelParameters,
    base: ModelParameters,
    model_config: ModelConfig,
    ks: Sequence[int] = (1,),
    n_batches: int = 50,
    seed: int = 0,
) -> Dict[int, float]:
    """
    For held-out reference images, rank the 17 texts of its VTE batch by
    S(x_I, x_T); recall@K of the reference's own text.
    """
    batches = vte_batches(items, n_batches, seed, stream="vte_eval")
    visual = frozen_visual_features(items, base, model_config)
    ranked: List[List[str]] = []
    relevant = []
    for ref, negs in batches:
        rows = [ref, *negs]
        x_I = project_joint(visual[ref.id], "visual", params).values
        x_T = project_joint(text_encode_batch([r.tokens for r in rows], params, model_config), "text", params).values
        sims = x_T @ x_I
        ids = np.array([r.id for r in rows])
        order = np.lexsort((ids, -sims))
        ranked.append([str(ids[o]) for o in order])
        relevant.append({ref.id})
    return {int(k): recall_at_k(ranked, relevant, int(k)) for k in ks}


def train_vte(
    items: Sequence[ItemRecord],
    config: TrainingConfig,
    frozen_visual_base: ModelParameters,
    model_config: Optional[ModelConfig] = None,
    loss_config: Optional[LossConfig] = None,
    log: Optional[TrainingLogger] = None,
) -> Tuple[ModelParameters, List[EpochRecord]]:
    """Train text encoder + joint projections on VTE batches; the visual base stays bit-identical."""
    config.validate()
    model_config = (model_config or ModelConfig()).validate()
    loss_config = (loss_config or LossConfig()).validate()
    for l in range(len(model_config.base_layers)):
        for suffix in ("W", "b"):
            if f"base.{l}.{suffix}" not in frozen_visual_base:
                raise ConfigError(f"frozen visual base lacks 'base.{l}.{suffix}'")
    before = frozen_visual_base.fingerprint(("base.",))

    train_items = items_in_split(items, "train") or list(items)
    val_items = items_in_split(items, "val")
    if val_items and not vte_feasible(val_items):
        logger.warning("val split too small for %d-negative VTE batches; val_r1 not reported", VTE_NEGATIVES)
        val_items = []
    visual = frozen_visual_features(train_items, frozen_visual_base, model_config)

    params = init_params(model_config, "vte", config.seed)
    names = params.names(VTE_PREFIXES)
    opt = RMSProp(config.vte_lr, config.rmsprop_decay, config.rmsprop_eps)
    step = _Stepper(params, config.grad_clip)
    records: List[EpochRecord] = []
    per_step = config.vte_batches_per_step

    for epoch in tqdm(range(1, config.epochs + 1), desc="vte", disable=not config.show_progress):
        batches = vte_batches(
            train_items, config.vte_steps_per_epoch * per_step, config.seed, stream=f"vte_train/{epoch}"
        )
        losses = [
            step(
                opt,
                names,
                lambda chunk=batches[s * per_step : (s + 1) * per_step]: vte_loss(
                    params, chunk, visual, model_config, loss_config.m_rank
                ),
            )
            for s in range(config.vte_steps_per_epoch)
        ]
        metric = None
        if val_items:
            metric = vte_text_recall(val_items, params, frozen_visual_base, model_config, (1,), seed=config.seed)[1]
        _emit(EpochRecord(epoch, "vte", float(np.mean(losses)), metric, "val_r1"), records, log)

    if frozen_visual_base.fingerprint(("base.",)) != before:
        raise ContractError("visual base parameters changed during VTE training")
    return params, records


# -------------------------
# Margin cross-validation
# -------------------------
@dataclass
class MarginSweepResult:
    best_margin: float
    auc: Dict[float, float]
    diverged: List[float]
    active_negative_fraction: Dict[float, float]
    params: Dict[float, ModelParameters] = field(default_factory=dict)


def cross_validate_margin(
    variant: str,
    items: Sequence[ItemRecord],
    pairs_by_split: Mapping[str, Sequence[PairSample]],
    margin_candidates: Sequence[float],
    config: TrainingConfig,
    model_config: Optional[ModelConfig] = None,
    loss_config: Optional[LossConfig] = None,
    keep_params: bool = False,
) -> MarginSweepResult:
    """
    One model per candidate margin, trained on the train pairs and scored by
    validation AUC. A candidate whose run hits non-finite values scores 0.5 (chance).
    Ties go to the smaller margin.
    """
    candidates = sorted({float(m) for m in margin_candidates})
    if not candidates:
        raise ConfigError("margin_candidates is empty")
    for split in ("train", "val"):
        if not pairs_by_split.get(split):
            raise ConfigError(f"cross_validate_margin needs '{split}' pairs")
    model_config = (model_config or ModelConfig()).validate()
    base_loss = loss_config or LossConfig()
    val = pair_arrays(pairs_by_split["val"], items_by_id(items))
    labels = val.Y.astype(np.int64)

    auc: Dict[float, float] = {}
    active: Dict[float, float] = {}
    diverged: List[float] = []
    kept: Dict[float, ModelParameters] = {}
    for m in tqdm(candidates, desc="margins", disable=not config.show_progress):
        lc = dataclasses.replace(base_loss, m_contrastive=m)
        try:
            params, _ = train_siamese(variant, items, pairs_by_split["train"], config, model_config, lc)
        except NumericsError as e:
            logger.warning("margin %g diverged (%s); scored as chance", m, e)
            auc[m] = 0.5
            diverged.append(m)
            continue
        d = pair_distances_for(variant, params, model_config, val)
        auc[m] = roc_auc(compatibility_score(d), labels)
        active[m] = active_negative_fraction(d, labels, m)
        logger.info("margin %g: val_auc=%.6f active_negatives=%.3f", m, auc[m], active[m])
        if keep_params:
            kept[m] = params

    best = max(candidates, key=lambda m: auc[m])
    return MarginSweepResult(best, auc, diverged, active, kept)


# -------------------------
# Gradient check
# -------------------------
GRADCHECK_WIDTH = 12


def gradcheck_model(model_config: Optional[ModelConfig] = None) -> ModelConfig:
    """Copy of `model_config` with every width capped so per-coordinate finite differences stay cheap."""
    m = model_config or ModelConfig()
    return ModelConfig(
        input_dim=min(int(m.input_dim), GRADCHECK_WIDTH),
        base_layers=[min(int(w), GRADCHECK_WIDTH) for w in m.base_layers],
        embedding_dim=min(int(m.embedding_dim), 8),
        num_styles=min(int(m.num_styles), 5),
        num_types=min(int(m.num_types), 4),
        text_vocab_size=min(int(m.text_vocab_size), 20),
        token_embed_dim=min(int(m.token_embed_dim), 6),
        lstm_hidden=min(int(m.lstm_hidden), 5),
        joint_dim=min(int(m.joint_dim), 6),
    ).validate()


def gradient_check(
    seed: int = 0,
    n_samples: int = 100,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    m_contrastive: float = 3.0,
    m_rank: float = 0.1,
    model_config: Optional[ModelConfig] = None,
) -> Dict[str, ad.GradCheckResult]:
    """Finite-difference check of the contrastive, categorical and hinge rank losses on a downsized random model."""
    cfg = gradcheck_model(model_config)
    rng = named_rng(seed, "gradcheck")
    n = 6
    batch = PairArrays(
        A=rng.standard_normal((n, cfg.input_dim)),
        B=rng.standard_normal((n, cfg.input_dim)),
        Y=np.array([1, 0] * (n // 2), dtype=DTYPE),
        style_a=rng.integers(cfg.num_styles, size=n),
        style_b=rng.integers(cfg.num_styles, size=n),
    )
    results: Dict[str, ad.GradCheckResult] = {}
    for name, variant in (("contrastive", "canonical"), ("categorical", "categorical")):
        params = init_params(cfg, variant, seed)
        results[name] = ad.finite_difference_check(
            lambda _p, params=params, variant=variant: siamese_loss(variant, params, cfg, batch, m_contrastive),
            params,
            epsilon,
            tolerance,
            n_samples,
            seed,
        )

    params = init_params(cfg, "vte", seed)
    rows = [
        ItemRecord(
            f"g{k}",
            rng.standard_normal(cfg.input_dim),
            k % cfg.num_styles,
            k % cfg.num_types,
            rng.integers(cfg.text_vocab_size, size=3),
        )
        for k in range(4)
    ]
    visual = {r.id: rng.standard_normal(cfg.base_out_dim) for r in rows}
    batches = [(rows[0], rows[1:3]), (rows[3], rows[1:3])]
    results["hinge_rank"] = ad.finite_difference_check(
        lambda _p: vte_loss(params, batches, visual, cfg, m_rank), params, epsilon, tolerance, n_samples, seed
    )
    return results
