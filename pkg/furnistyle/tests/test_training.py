# furnistyle/tests/test_training.py
import dataclasses

import numpy as np
import pytest

from furnistyle import autodiff as ad
from furnistyle import training
from furnistyle.curation import split
from furnistyle.dataset import items_by_id, items_in_split
from furnistyle.errors import ConfigError, ContractError, NumericsError
from furnistyle.evaluation import active_negative_fraction
from furnistyle.losses import LossConfig
from furnistyle.models import ModelConfig, ModelParameters, init_params, param_count
from furnistyle.sampling import strategic_pairs
from furnistyle.synthetic import SynthSpec, build_vocabulary, generate
from furnistyle.training import (
    RMSProp,
    SGDMomentum,
    TrainingConfig,
    _Stepper,
    clip_gradients,
    cross_validate_margin,
    pair_arrays,
    pair_auc,
    pair_distances_for,
    siamese_loss,
    train_siamese,
    train_vte,
    vte_text_recall,
)
from furnistyle.training_log import TrainingLogger, read_records


@pytest.fixture
def pairs(small_items):
    return {
        "train": strategic_pairs(items_in_split(small_items, "train"), 40, 16, seed=0),
        "val": strategic_pairs(items_in_split(small_items, "val"), 10, 4, seed=1),
    }


# ─── Optimizers ─────────────────────────────────────────────────────
def _quadratic_params():
    return ModelParameters({"w": ad.parameter(np.array([[3.0, -2.0]]))})


@pytest.mark.parametrize("make_opt", [lambda: SGDMomentum(0.1, 0.9), lambda: RMSProp(0.05)])
def test_optimizers_minimise_a_quadratic(make_opt):
    params = _quadratic_params()
    opt = make_opt()
    for _ in range(200):
        params.zero_grad()
        ad.backward(ad.sum(ad.square(params["w"])))
        opt.step(params, ["w"])
    assert np.abs(params["w"].values).max() < 0.1


def test_sgd_momentum_update_rule():
    params = _quadratic_params()
    opt = SGDMomentum(0.1, 0.5)
    for expected in ([[2.4, -1.6]], [[1.62, -1.08]]):
        params.zero_grad()
        ad.backward(ad.sum(ad.square(params["w"])))
        opt.step(params, ["w"])
        np.testing.assert_allclose(params["w"].values, expected)


def test_optimizer_refuses_non_finite_parameters():
    params = ModelParameters({"w": ad.parameter(np.array([1e308]))})
    params["w"].grad = np.array([-1e308])
    with pytest.raises(NumericsError):
        SGDMomentum(10.0, 0.0).step(params, ["w"])


# ─── Siamese training ───────────────────────────────────────────────
def test_training_reduces_loss(small_items, small_model, fast_training, loss_config, pairs):
    by_id = items_by_id(small_items)
    batch = pair_arrays(pairs["train"], by_id)
    init = init_params(small_model, "canonical", fast_training.seed)
    before = siamese_loss("canonical", init, small_model, batch, loss_config.m_contrastive).item()
    params, records = train_siamese(
        "canonical", small_items, pairs["train"], fast_training, small_model, loss_config, val_pairs=pairs["val"]
    )
    after = siamese_loss("canonical", params, small_model, batch, loss_config.m_contrastive).item()
    assert after < before
    assert [r.stage for r in records] == ["init", "head", "finetune", "finetune"]
    assert all(r.metric is not None and 0.0 <= r.metric <= 1.0 for r in records)


def test_zero_learning_rate_leaves_parameters_unchanged(small_items, small_model, fast_training, loss_config, pairs):
    cfg = dataclasses.replace(fast_training, stage1_lr=0.0, stage2_lr=0.0)
    params, _ = train_siamese("canonical", small_items, pairs["train"], cfg, small_model, loss_config)
    assert params.fingerprint() == init_params(small_model, "canonical", cfg.seed).fingerprint()


def test_head_stage_only_touches_head(small_items, small_model, fast_training, loss_config, pairs):
    cfg = dataclasses.replace(fast_training, stage2_lr=0.0)
    init = init_params(small_model, "categorical", cfg.seed)
    params, _ = train_siamese("categorical", small_items, pairs["train"], cfg, small_model, loss_config)
    assert params.fingerprint(("base.",)) == init.fingerprint(("base.",))
    assert params.fingerprint(("E.",)) != init.fingerprint(("E.",))
    assert params.fingerprint(("C.",)) != init.fingerprint(("C.",))


def test_training_is_deterministic(small_items, small_model, fast_training, loss_config, pairs):
    a, rec_a = train_siamese("categorical", small_items, pairs["train"], fast_training, small_model, loss_config)
    b, rec_b = train_siamese("categorical", small_items, pairs["train"], fast_training, small_model, loss_config)
    assert a.fingerprint() == b.fingerprint()
    assert [r.format() for r in rec_a] == [r.format() for r in rec_b]


def test_training_log_file(small_items, small_model, fast_training, loss_config, pairs, tmp_path):
    log = TrainingLogger(tmp_path / "train.log", "short", seed=0)
    model = dataclasses.replace(small_model, short_truncate_at=1)
    _, records = train_siamese(
        "short", small_items, pairs["train"], fast_training, model, loss_config, val_pairs=pairs["val"], log=log
    )
    log.finalize()
    assert [r.format() for r in read_records(tmp_path / "train.log")] == [r.format() for r in records]
    text = (tmp_path / "train.log").read_text()
    assert "Variant: short" in text


def test_huge_margin_trains_with_every_negative_active(small_items, small_model, fast_training, pairs):
    huge = LossConfig(m_contrastive=1e7)
    params, records = train_siamese(
        "canonical", small_items, pairs["train"], fast_training, small_model, huge, val_pairs=pairs["val"]
    )
    assert all(np.isfinite(r.loss) for r in records if r.loss is not None)
    assert all(0.0 <= r.metric <= 1.0 for r in records)
    val = pair_arrays(pairs["val"], items_by_id(small_items))
    d = pair_distances_for("canonical", params, small_model, val)
    assert active_negative_fraction(d, val.Y.astype(np.int64), 1e7) >= 0.99


def test_non_finite_loss_raises_with_batch_index(small_items, small_model, fast_training, loss_config, pairs):
    blown = init_params(small_model, "canonical", fast_training.seed)
    blown["E.W"].values = blown["E.W"].values * 1e200
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericsError) as info:
            train_siamese(
                "canonical", small_items, pairs["train"], fast_training, small_model, loss_config, params=blown
            )
    assert info.value.batch_index == 0


def test_clip_gradients_bounds_the_joint_norm():
    params = ModelParameters({"a": ad.parameter(np.zeros(2)), "b": ad.parameter(np.zeros(1))})
    params["a"].grad = np.array([30.0, 0.0])
    params["b"].grad = np.array([-40.0])
    assert clip_gradients(params, ["a", "b"], 10.0) == pytest.approx(50.0)
    np.testing.assert_allclose(params["a"].grad, [6.0, 0.0])
    np.testing.assert_allclose(params["b"].grad, [-8.0])
    assert clip_gradients(params, ["a", "b"], 10.0) == pytest.approx(10.0)
    np.testing.assert_allclose(params["b"].grad, [-8.0])


def test_clipped_step_moves_parameters_at_most_lr_times_clip():
    params = ModelParameters({"w": ad.parameter(np.array([[3.0, -2.0]]))})
    before = params["w"].values.copy()
    step = _Stepper(params, grad_clip=0.5)
    step(SGDMomentum(1.0, 0.0), ["w"], lambda: ad.scale(ad.sum(ad.square(params["w"])), 1e6))
    assert np.linalg.norm(params["w"].values - before) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        TrainingConfig(grad_clip=0.0).validate()


def test_unknown_variant_and_bad_config(small_items, small_model, fast_training, pairs):
    with pytest.raises(ConfigError):
        train_siamese("triplet", small_items, pairs["train"], fast_training, small_model)
    with pytest.raises(ConfigError):
        train_siamese("canonical", small_items, pairs["train"], TrainingConfig(batch_size=0), small_model)
    with pytest.raises(ConfigError):
        TrainingConfig(stage1_lr=-1.0).validate()


def test_baseline_trains_classifier_only_loss(small_items, small_model, fast_training, pairs):
    params, records = train_siamese("baseline", small_items, pairs["train"], fast_training, small_model)
    assert "E.W" not in params
    assert records[-1].loss > 0


# ─── Margin sweep ───────────────────────────────────────────────────
def test_margin_sweep_measures_every_candidate(small_items, small_model, fast_training, pairs):
    result = cross_validate_margin("canonical", small_items, pairs, [2.0, 1e7], fast_training, small_model)
    assert result.diverged == []
    assert set(result.auc) == {2.0, 1e7}
    assert all(0.0 <= a <= 1.0 for a in result.auc.values())
    assert result.active_negative_fraction[1e7] >= 0.99
    assert 0.0 <= result.active_negative_fraction[2.0] <= 1.0
    assert result.best_margin == max(sorted(result.auc), key=lambda m: result.auc[m])


def test_margin_sweep_scores_divergence_as_chance(monkeypatch, small_items, small_model, fast_training, pairs):
    real = training.train_siamese

    def blow_up_at_huge_margin(variant, items, train_pairs, config, model_config, loss_config):
        if loss_config.m_contrastive > 1e6:
            raise NumericsError("minibatch 3: loss is inf", batch_index=3)
        return real(variant, items, train_pairs, config, model_config, loss_config)

    monkeypatch.setattr(training, "train_siamese", blow_up_at_huge_margin)
    result = cross_validate_margin("canonical", small_items, pairs, [2.0, 1e7], fast_training, small_model)
    assert result.diverged == [1e7]
    assert result.auc[1e7] == 0.5
    assert 1e7 not in result.active_negative_fraction
    assert set(result.auc) == {2.0, 1e7}


def test_margin_sweep_needs_val_pairs(small_items, small_model, fast_training, pairs):
    with pytest.raises(ConfigError):
        cross_validate_margin("canonical", small_items, {"train": pairs["train"]}, [1.0], fast_training, small_model)


# ─── Joint embedding ────────────────────────────────────────────────
@pytest.fixture
def vte_setup():
    spec = SynthSpec(num_styles=8, num_types=3, items_per_cell=20, feature_dim=16, seed=0)
    items = split(generate(spec).items, seed=0)
    model = ModelConfig(
        input_dim=16,
        base_layers=[16, 12],
        embedding_dim=6,
        num_styles=8,
        num_types=3,
        text_vocab_size=build_vocabulary(spec).size,
        token_embed_dim=8,
        lstm_hidden=8,
        joint_dim=8,
    )
    cfg = TrainingConfig(vte_lr=0.01, epochs=4, vte_steps_per_epoch=40, vte_batches_per_step=2, seed=0)
    return items, model, cfg


def test_vte_keeps_visual_base_frozen(vte_setup):
    items, model, cfg = vte_setup
    cfg = dataclasses.replace(cfg, epochs=1, vte_steps_per_epoch=3)
    base = init_params(model, "canonical", seed=0)
    before = base.fingerprint(("base.",))
    params, records = train_vte(items, cfg, base, model)
    assert base.fingerprint(("base.",)) == before
    assert not any(n.startswith("base.") for n in params)
    assert records[0].stage == "vte" and records[0].metric_name == "val_r1"


def test_vte_rejects_incomplete_base(vte_setup):
    items, model, cfg = vte_setup
    base = init_params(model, "canonical", seed=0)
    del base["base.1.W"]
    with pytest.raises(ConfigError):
        train_vte(items, cfg, base, model)


@pytest.mark.slow
def test_vte_text_recall_beats_chance(vte_setup):
    items, model, cfg = vte_setup
    recalls = []
    for seed in range(5):
        run = dataclasses.replace(cfg, seed=seed)
        base = init_params(model, "canonical", seed=seed)
        params, _ = train_vte(items, run, base, model)
        held_out = items_in_split(items, "test")
        recalls.append(vte_text_recall(held_out, params, base, model, (1,), n_batches=40, seed=seed)[1])
    assert np.mean(recalls) > 3.0 / 17.0


# ─── Trends ─────────────────────────────────────────────────────────
def _trend_data(seed, styles=8, types=4, per_cell=50, dim=32, **signals):
    spec = SynthSpec(
        num_styles=styles,
        num_types=types,
        items_per_cell=per_cell,
        feature_dim=dim,
        noise_sigma=0.4,
        seed=seed,
        **signals,
    )
    items = split(generate(spec).items, seed=seed)
    model = ModelConfig(input_dim=dim, base_layers=[32, 16], embedding_dim=8, num_styles=styles, num_types=types)
    pairs = {
        "train": strategic_pairs(items_in_split(items, "train"), 150, 16, seed=seed),
        "val": strategic_pairs(items_in_split(items, "val"), 60, 16, seed=seed + 1),
    }
    return items, model, pairs


@pytest.mark.slow
def test_margin_trend_huge_margin_fails():
    # type differences dominate the raw features
    cfg = TrainingConfig(stage1_iterations=20, epochs=2, stage2_lr=0.001, batch_size=32)
    tuned = 3.0
    tiny, huge = 0.01 * tuned, 1e6 * tuned
    aucs = {tiny: [], tuned: [], huge: []}
    active = []
    for seed in range(5):
        items, model, pairs = _trend_data(seed, style_signal=1.5, type_signal=3.0)
        seeded = dataclasses.replace(cfg, seed=seed)
        result = cross_validate_margin("canonical", items, pairs, list(aucs), seeded, model)
        assert result.diverged == []
        for m in aucs:
            aucs[m].append(result.auc[m])
        active.append(result.active_negative_fraction[huge])
    mean = {m: np.mean(v) for m, v in aucs.items()}
    assert np.mean(active) >= 0.99
    assert mean[huge] <= 0.55
    assert mean[tuned] >= mean[tiny] + 0.02
    assert mean[tuned] >= mean[huge] + 0.1


@pytest.mark.slow
def test_categorical_not_slower_than_canonical():
    cfg = TrainingConfig(stage1_iterations=0, epochs=1, stage2_lr=0.001, batch_size=32)
    canonical, categorical = [], []
    for seed in range(10):
        items, model, pairs = _trend_data(seed, styles=6, types=3, per_cell=40, dim=16)
        run = dataclasses.replace(cfg, seed=seed)
        lc = LossConfig(m_contrastive=2.0)
        for variant, out in (("canonical", canonical), ("categorical", categorical)):
            params, _ = train_siamese(variant, items, pairs["train"], run, model, lc)
            out.append(pair_auc(variant, params, model, pair_arrays(pairs["val"], items_by_id(items))))
    assert np.mean(categorical) >= np.mean(canonical)


@pytest.mark.slow
def test_short_network_close_to_full():
    cfg = TrainingConfig(stage1_iterations=20, epochs=2, stage2_lr=0.001, batch_size=32)
    full, short = [], []
    for seed in range(5):
        items, model, pairs = _trend_data(seed)
        short_model = dataclasses.replace(model, short_truncate_at=1)
        assert param_count(short_model, "short") < param_count(model, "canonical")
        run = dataclasses.replace(cfg, seed=seed)
        lc = LossConfig(m_contrastive=2.0)
        val = pair_arrays(pairs["val"], items_by_id(items))
        p_full, _ = train_siamese("canonical", items, pairs["train"], run, model, lc)
        p_short, _ = train_siamese("short", items, pairs["train"], run, short_model, lc)
        full.append(pair_auc("canonical", p_full, model, val))
        short.append(pair_auc("short", p_short, short_model, val))
    assert np.mean(full) > 0.85 and np.mean(short) > 0.85
    assert abs(np.mean(full) - np.mean(short)) <= 0.08


def test_fingerprint_check_guards_base(monkeypatch, vte_setup):
    items, model, cfg = vte_setup
    cfg = dataclasses.replace(cfg, epochs=1, vte_steps_per_epoch=1)
    base = init_params(model, "canonical", seed=0)
    calls = iter(["a", "b"])
    monkeypatch.setattr(ModelParameters, "fingerprint", lambda self, prefixes=(): next(calls))
    with pytest.raises(ContractError):
        train_vte(items, cfg, base, model)
