# furnistyle/cli.py
"""
furnistyle command line.

Usage:
    python -m furnistyle synth        --seed 0 --out runs/demo [--images]
    python -m furnistyle curate       runs/demo/dataset.tsv --images runs/demo/images.npz --out runs/demo/clean
    python -m furnistyle train        runs/demo/clean/dataset.tsv --variant categorical --out runs/demo/cat
    python -m furnistyle train-vte    runs/demo/clean/dataset.tsv --checkpoint runs/demo/cat/checkpoint.npz
    python -m furnistyle eval         runs/demo/cat/checkpoint.npz runs/demo/clean/dataset.tsv
    python -m furnistyle margin-sweep runs/demo/clean/dataset.tsv --candidates 1 10 1000
    python -m furnistyle retrieve     runs/demo/cat/checkpoint.npz runs/demo/clean/dataset.tsv s00-t0-0003 -k 5
    python -m furnistyle gradcheck

Every command takes --config PATH (YAML), --seed N and --out DIR.
Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerics error.
"""

from __future__ import annotations
import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import coloredlogs
import numpy as np
import yaml
from rich.console import Console
from rich.table import Table

from .checkpoint import load_checkpoint, load_container, save_checkpoint, save_container
from .config import (
    DEFAULT_OUT_DIR,
    IMAGES_FORMAT,
    NEG_RATIO,
    SPLITS,
    dataclass_from_dict,
)
from .curation import (
    CentroidTypeClassifier,
    CurationConfig,
    dedup,
    outlier_filter,
    phash,
    split,
    split_counts,
    write_removal_log,
)
from .dataset import (
    ItemRecord,
    PairSample,
    items_by_id,
    items_in_split,
    read_dataset,
    read_pairs,
    write_dataset,
    write_pairs,
)
from .errors import (
    EXIT_USAGE,
    ConfigError,
    FurnistyleError,
    InputError,
    MetricError,
    NumericsError,
    exit_code_for,
)
from .evaluation import (
    build_report,
    describe,
    nearest_centroid_accuracy,
    pair_distances,
    pair_labels,
    write_report,
)
from .losses import LossConfig
from .models import SIAMESE_VARIANTS, ModelConfig, ModelParameters, embed_numpy, init_params, param_count
from .retrieval import (
    build_index,
    joint_embedder,
    query_compatible,
    query_with_text,
    save_index,
    style_recall_at_k,
    text_vector,
    write_query_results,
)
from .sampling import strategic_pairs
from .synthetic import SynthSpec, dataset_meta, generate, generate_images
from .training import TrainingConfig, cross_validate_margin, gradient_check, train_siamese, train_vte
from .training_log import TrainingLogger

logger = logging.getLogger("furnistyle")
console = Console()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# -------------------------
# Experiment config
# -------------------------
@dataclass
class ExperimentConfig:
    seed: Optional[int] = None
    out_dir: str = str(DEFAULT_OUT_DIR)
    n_positive: int = 500
    val_positive: int = 100
    test_positive: int = 200
    neg_ratio: int = NEG_RATIO
    recall_ks: List[int] = field(default_factory=lambda: [1, 5, 10])
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    curation: CurationConfig = field(default_factory=CurationConfig)

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory: set 'seed' in the config file or pass --seed")
        if int(self.seed) < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        for name in ("n_positive", "val_positive", "test_positive"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if int(self.neg_ratio) < 0:
            raise ConfigError(f"neg_ratio must be >= 0, got {self.neg_ratio}")
        if not self.recall_ks or any(int(k) < 1 for k in self.recall_ks):
            raise ConfigError(f"recall_ks must be positive integers, got {self.recall_ks}")
        # one seed drives every stream
        self.training.seed = int(self.seed)
        self.synth.seed = int(self.seed)
        self.model.validate()
        self.training.validate()
        self.loss.validate()
        self.synth.validate()
        self.curation.validate()
        return self


_SECTIONS = {
    "model": ModelConfig,
    "training": TrainingConfig,
    "loss": LossConfig,
    "synth": SynthSpec,
    "curation": CurationConfig,
}


def experiment_from_dict(data: Dict[str, Any] | None, where: str = "config") -> ExperimentConfig:
    data = dict(data or {})
    sections = {
        name: dataclass_from_dict(cls, data.pop(name, None), f"{where}:{name}") for name, cls in _SECTIONS.items()
    }
    sections["curation"].split_ratios = tuple(sections["curation"].split_ratios)
    top = dataclass_from_dict(ExperimentConfig, data, where)
    return dataclasses.replace(top, **sections)


def load_experiment_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return experiment_from_dict(data, where=str(path))


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """--config file (or defaults), then --seed / --out overrides, then full validation."""
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg.validate()


# -------------------------
# Shared helpers
# -------------------------
def _load_items(path: Path) -> tuple[List[ItemRecord], Dict[str, object]]:
    items, meta = read_dataset(path)
    if not items:
        raise InputError(f"{path}: dataset holds no items")
    return items, meta


def _check_feature_width(items: Sequence[ItemRecord], model: ModelConfig, path: Path) -> None:
    dim = items[0].features.size
    if dim != model.input_dim:
        raise InputError(f"{path}: feature dim {dim} != model input_dim {model.input_dim}")


def _check_dataset_fits(items: Sequence[ItemRecord], meta: Dict[str, object], model: ModelConfig, path: Path) -> None:
    _check_feature_width(items, model, path)
    if max(it.style for it in items) >= model.num_styles:
        raise ConfigError(f"{path}: style ids exceed model.num_styles={model.num_styles}")
    vocab = int(meta.get("vocab_size", 0) or 0)
    if vocab > model.text_vocab_size:
        raise ConfigError(f"{path}: vocab_size={vocab} exceeds model.text_vocab_size={model.text_vocab_size}")


def _pairs_for(
    items: Sequence[ItemRecord], which: str, n_positive: int, cfg: ExperimentConfig
) -> List[PairSample]:
    group = items_in_split(items, which) if any(it.split for it in items) else list(items)
    if not group:
        return []
    return strategic_pairs(group, n_positive, cfg.neg_ratio, seed=cfg.seed + SPLITS.index(which))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _table(title: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    table = Table(title=title)
    for c in columns:
        table.add_column(c)
    for r in rows:
        table.add_row(*[str(v) for v in r])
    console.print(table)


# -------------------------
# Commands
# -------------------------
def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    data = generate(cfg.synth)
    out = _out_dir(cfg)
    write_dataset(out / "dataset.tsv", data.items, dataset_meta(cfg.synth))
    if args.images:
        images = generate_images(cfg.synth, data.items)
        save_container(out / "images.npz", images, {"format": IMAGES_FORMAT})
    logger.info("wrote %d items to %s", len(data.items), out / "dataset.tsv")
    return 0


def _load_images(path: Path) -> Dict[str, np.ndarray]:
    arrays, meta = load_container(path)
    if meta.get("format") != IMAGES_FORMAT:
        raise InputError(f"{path}: format tag {meta.get('format')!r}, expected {IMAGES_FORMAT!r}")
    return arrays


def cmd_curate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    cc = cfg.curation
    if args.threshold is not None:
        cc.hamming_threshold = args.threshold
    if args.outlier_fraction is not None:
        cc.outlier_fraction = args.outlier_fraction
    cc.validate()
    items, meta = _load_items(args.dataset)
    images = _load_images(args.images) if args.images else None
    if images is not None:
        missing = [it.id for it in items if it.id not in images]
        if missing:
            raise InputError(f"{args.images}: no image for item '{missing[0]}'")

    removals = []
    if images is not None:
        items, removed = dedup([(it, phash(images[it.id])) for it in items], cc.hamming_threshold)
        removals += removed
    if not args.skip_outliers:
        num_types = int(meta.get("num_types", max(it.furniture_type for it in items) + 1))
        clf = CentroidTypeClassifier.fit_items(items, num_types)
        items, removed = outlier_filter(items, clf, cc.outlier_fraction)
        removals += removed
    items = split(items, cc.split_ratios, seed=cfg.seed, min_cell=cc.min_cell)

    out = _out_dir(cfg)
    meta = {k: v for k, v in meta.items() if k != "count"}
    write_dataset(out / "dataset.tsv", items, meta)
    write_removal_log(out / "removals.tsv", sorted(removals, key=lambda r: (r.cause, r.id)))
    counts = split_counts(items)
    _table("Curation", ["kept", "removed", *SPLITS], [[len(items), len(removals), *[counts[s] for s in SPLITS]]])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.truncate_at is not None:
        cfg.model.short_truncate_at = args.truncate_at
        cfg.model.validate()
    if args.margin is not None:
        cfg.loss.m_contrastive = args.margin
        cfg.loss.validate()
    variant = args.variant
    if variant not in SIAMESE_VARIANTS:
        raise ConfigError(f"unknown variant '{variant}', expected one of {SIAMESE_VARIANTS}")
    param_count(cfg.model, variant)

    items, meta = _load_items(args.dataset)
    _check_dataset_fits(items, meta, cfg.model, args.dataset)
    train_pairs = _pairs_for(items, "train", cfg.n_positive, cfg)
    val_pairs = _pairs_for(items, "val", cfg.val_positive, cfg) if any(it.split for it in items) else []

    out = _out_dir(cfg)
    write_pairs(out / "pairs_train.tsv", train_pairs)
    if val_pairs:
        write_pairs(out / "pairs_val.tsv", val_pairs)
    log = TrainingLogger(out / "train.log", variant, cfg.seed)
    log.log_status(f"pairs: train={len(train_pairs)} val={len(val_pairs)} margin={cfg.loss.m_contrastive:g}")
    params, records = train_siamese(
        variant, items, train_pairs, cfg.training, cfg.model, cfg.loss, val_pairs=val_pairs or None, log=log
    )
    log.finalize()
    extras = {
        "m_contrastive": cfg.loss.m_contrastive,
        "seed": cfg.seed,
        "param_count": param_count(cfg.model, variant),
        "final_val_auc": records[-1].metric,
    }
    save_checkpoint(out / "checkpoint.npz", cfg.model, params, variant, extras)
    _table(
        f"Training ({variant})",
        ["epoch", "stage", "loss", "val_auc"],
        [
            [
                r.epoch,
                r.stage,
                "-" if r.loss is None else f"{r.loss:.6f}",
                "-" if r.metric is None else f"{r.metric:.4f}",
            ]
            for r in records
        ],
    )
    return 0


def cmd_train_vte(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    items, meta = _load_items(args.dataset)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        model = ck.config
        base = ModelParameters({n: ck.params[n] for n in ck.params.names(("base.",))})
    else:
        model = cfg.model
        fresh = init_params(model, "canonical", cfg.seed)
        base = ModelParameters({n: fresh[n] for n in fresh.names(("base.",))})
    _check_dataset_fits(items, meta, model, args.dataset)

    out = _out_dir(cfg)
    log = TrainingLogger(out / "train_vte.log", "vte", cfg.seed)
    log.log_status(f"base: {args.checkpoint or 'fresh init'} | m_rank={cfg.loss.m_rank:g}")
    params, records = train_vte(items, cfg.training, base, model, cfg.loss, log=log)
    log.finalize()
    extras = {"m_rank": cfg.loss.m_rank, "seed": cfg.seed, "final_val_r1": records[-1].metric}
    save_checkpoint(out / "checkpoint_vte.npz", model, base.merged(params), "vte", extras)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    ck = load_checkpoint(args.checkpoint)
    if ck.variant not in SIAMESE_VARIANTS:
        raise ConfigError(f"{args.checkpoint}: eval needs a siamese checkpoint, got variant '{ck.variant}'")
    items, meta = _load_items(args.dataset)
    _check_feature_width(items, ck.config, args.dataset)
    by_id = items_by_id(items)
    if args.pairs:
        pairs = read_pairs(args.pairs)
    else:
        pairs = _pairs_for(items, "test", cfg.test_positive, cfg)
        if not pairs:
            raise InputError(f"{args.dataset}: no test split to sample evaluation pairs from")
    unknown = next((p for p in pairs if p.i not in by_id or p.j not in by_id), None)
    if unknown is not None:
        raise InputError(f"pair ({unknown.i}, {unknown.j}) references an id missing from {args.dataset}")

    used = sorted({p.i for p in pairs} | {p.j for p in pairs})
    V = embed_numpy(ck.variant, np.stack([by_id[i].features for i in used]), ck.params, ck.config)
    vectors = {i: V[k] for k, i in enumerate(used)}
    distances = pair_distances(pairs, vectors)
    labels = pair_labels(pairs)
    logger.info("positive distances: %s", describe(distances[labels == 1]))
    logger.info("negative distances: %s", describe(distances[labels == 0]))

    test_items = items_in_split(items, "test") or list(items)

    def embed(X: np.ndarray) -> np.ndarray:
        return embed_numpy(ck.variant, X, ck.params, ck.config)

    index = build_index(test_items, embed, "euclidean")
    try:
        recall = style_recall_at_k(index, cfg.recall_ks, exclude_type=True)
    except MetricError as e:
        logger.warning("recall@K skipped: %s", e)
        recall = {}
    extras: Dict[str, float] = {}
    train_items = items_in_split(items, "train")
    if train_items and items_in_split(items, "test"):
        extras["style_probe_accuracy"] = nearest_centroid_accuracy(
            embed(np.stack([it.features for it in train_items])),
            [it.style for it in train_items],
            index.vectors,
            list(index.styles),
        )
    report = build_report(pairs, distances, {it.id: it.style for it in items}, recall, extras)
    if report.kde is not None:
        report.extras["kde_overlap"] = report.kde.overlap()

    out = _out_dir(cfg)
    write_report(report, out, title=f"Evaluation ({ck.variant})")
    rows = [["auc_overall", f"{report.auc_overall:.4f}"]]
    rows += [[f"recall@{k}", f"{v:.4f}"] for k, v in sorted(recall.items())]
    _table("Evaluation", ["metric", "value"], rows)
    return 0


def cmd_margin_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    variant = args.variant
    if variant not in ("canonical", "short", "categorical"):
        raise ConfigError(f"margin sweep needs a contrastive variant, got '{variant}'")
    candidates = args.candidates or cfg.training.margin_candidates
    if any(not float(m) > 0 for m in candidates):
        raise ConfigError("margin candidates must all be > 0")
    items, meta = _load_items(args.dataset)
    _check_dataset_fits(items, meta, cfg.model, args.dataset)
    if not any(it.split for it in items):
        raise InputError(f"{args.dataset}: margin sweep needs a curated dataset with train/val splits")
    pairs = {
        "train": _pairs_for(items, "train", cfg.n_positive, cfg),
        "val": _pairs_for(items, "val", cfg.val_positive, cfg),
    }
    result = cross_validate_margin(variant, items, pairs, candidates, cfg.training, cfg.model, cfg.loss)

    out = _out_dir(cfg)
    rows = []
    for m in sorted(result.auc):
        active = result.active_negative_fraction.get(m)
        rows.append(
            [
                f"{m:g}",
                f"{result.auc[m]:.6f}",
                "-" if active is None else f"{active:.6f}",
                "yes" if m in result.diverged else "no",
            ]
        )
    lines = ["margin\tval_auc\tactive_negatives\tdiverged"] + ["\t".join(r) for r in rows]
    (out / "margins.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _table(
        f"Margin sweep ({variant}); best m = {result.best_margin:g}",
        ["margin", "val_auc", "active_neg", "diverged"],
        rows,
    )
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.k < 1:
        raise ConfigError(f"-k must be >= 1, got {args.k}")
    ck = load_checkpoint(args.checkpoint)
    items, _ = _load_items(args.dataset)
    _check_feature_width(items, ck.config, args.dataset)
    by_id = items_by_id(items)
    if args.query not in by_id:
        raise InputError(f"query id '{args.query}' not in {args.dataset}")
    query = by_id[args.query]
    exclude_type = query.furniture_type if args.exclude_type else None

    if ck.variant == "vte":
        index = build_index(items, joint_embedder(ck.params, ck.config), "dot")
        x_I = index.vectors[index.row(query.id)]
        x_T = text_vector(args.text, ck.params, ck.config) if args.text else np.zeros(index.dim)
        result = query_with_text(index, x_I, x_T, args.k, exclude_type, exclude_ids=[query.id])
    else:
        if args.text:
            raise ConfigError("--text needs a joint (train-vte) checkpoint")
        index = build_index(items, lambda X: embed_numpy(ck.variant, X, ck.params, ck.config), "euclidean")
        q = index.vectors[index.row(query.id)]
        result = query_compatible(index, q, args.k, exclude_type, exclude_ids=[query.id])
    if result.truncated:
        logger.warning("only %d candidates for k=%d", len(result.hits), args.k)

    out = _out_dir(cfg)
    save_index(out / "index.npz", index, {"checkpoint_variant": ck.variant})
    write_query_results(out / f"query_{query.id}.tsv", result)
    _table(
        f"Top {args.k} for {query.id} (style {query.style}, type {query.furniture_type})",
        ["rank", "id", "style", "type", "score"],
        [
            [r, h.id, by_id[h.id].style, by_id[h.id].furniture_type, f"{h.score:.6f}"]
            for r, h in enumerate(result.hits, 1)
        ],
    )
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    results = gradient_check(seed=cfg.seed, n_samples=args.samples, model_config=cfg.model)
    _table(
        "Gradient check",
        ["loss", "max_rel_error", "checked", "skipped_kinks", "passed"],
        [[n, f"{r.max_relative_error:.3e}", r.checked, r.skipped_kinks, r.passed] for n, r in results.items()],
    )
    failed = [n for n, r in results.items() if not r.passed]
    if failed:
        raise NumericsError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# -------------------------
# Parser
# -------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the config/usage code instead of argparse's 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="furnistyle", description="Style-compatibility metric learning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--images", action="store_true", help="also write per-item intensity grids")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="dedup, outlier filter, split")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--images", type=Path, default=None)
    p.add_argument("--threshold", type=int, default=None, help="Hamming threshold")
    p.add_argument("--outlier-fraction", type=float, default=None)
    p.add_argument("--skip-outliers", action="store_true")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train a siamese variant")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--variant", default="canonical", choices=SIAMESE_VARIANTS)
    p.add_argument("--truncate-at", type=int, default=None, help="base depth for the short variant")
    p.add_argument("--margin", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-vte", help="train the joint image-text embedding")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, default=None, help="siamese checkpoint providing the visual base")
    p.set_defaults(func=cmd_train_vte)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("pairs", type=Path, nargs="?", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("margin-sweep", help="cross-validate the contrastive margin")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--variant", default="canonical")
    p.add_argument("--candidates", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_margin_sweep)

    p = sub.add_parser("retrieve", help="nearest compatible items for a query")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("query")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--text", type=int, nargs="+", default=None, help="token ids (joint checkpoint only)")
    p.add_argument("--exclude-type", action="store_true", help="skip items of the query's furniture type")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses on a width-capped copy of the model")
    _common(p)
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    coloredlogs.install(level=level, fmt=LOG_FORMAT, stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return int(args.func(args) or 0)
    except (FurnistyleError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return exit_code_for(e)
