# furnistyle/tests/test_models.py
import dataclasses

import numpy as np
import pytest

from furnistyle import autodiff as ad
from furnistyle.checkpoint import load_checkpoint, save_checkpoint
from furnistyle.errors import ConfigError, InputError, ShapeError
from furnistyle.models import (
    ModelConfig,
    classify,
    classify_batch,
    embed,
    embed_batch,
    embed_short,
    embedder_for,
    init_params,
    param_count,
    param_shapes,
    project_joint,
    text_encode,
    text_encode_batch,
)


def test_embed_shape_and_batch_agreement(small_model, rng):
    params = init_params(small_model, "canonical", seed=0)
    X = rng.standard_normal((5, small_model.input_dim))
    batch = embed_batch(X, params, small_model).values
    assert batch.shape == (5, small_model.embedding_dim)
    single = embed(X[2], params, small_model).values
    assert single.shape == (small_model.embedding_dim,)
    np.testing.assert_allclose(single, batch[2], atol=1e-12)


def test_embed_is_deterministic(small_model, rng):
    x = rng.standard_normal(small_model.input_dim)
    a = embed(x, init_params(small_model, "canonical", seed=3), small_model).values
    b = embed(x, init_params(small_model, "canonical", seed=3), small_model).values
    np.testing.assert_array_equal(a, b)


def test_embed_rejects_wrong_width(small_model):
    params = init_params(small_model, "canonical", seed=0)
    with pytest.raises(ShapeError):
        embed(np.zeros(small_model.input_dim + 1), params, small_model)


def test_classify_is_a_distribution(small_model, rng):
    params = init_params(small_model, "categorical", seed=0)
    p = classify(rng.standard_normal(small_model.input_dim), params, small_model).values
    assert p.shape == (small_model.num_styles,)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0)
    P = classify_batch(rng.standard_normal((3, small_model.input_dim)), params, small_model).values
    np.testing.assert_allclose(P.sum(axis=1), np.ones(3))


def test_short_variant_has_fewer_parameters(small_model):
    short = dataclasses.replace(small_model, short_truncate_at=1)
    assert param_count(short, "short") < param_count(short, "canonical")
    params = init_params(short, "short", seed=0)
    assert "base.1.W" not in params
    x = embed_short(np.ones(short.input_dim), params, short).values
    assert x.shape == (short.embedding_dim,)


def test_short_requires_truncation_depth(small_model):
    with pytest.raises(ConfigError):
        param_shapes(small_model, "short")
    with pytest.raises(ConfigError):
        dataclasses.replace(small_model, short_truncate_at=2).validate()
    with pytest.raises(ConfigError):
        dataclasses.replace(small_model, short_truncate_at=1, short_pool=5).validate()


def test_unknown_variant(small_model):
    with pytest.raises(ConfigError):
        init_params(small_model, "triplet", seed=0)
    with pytest.raises(ConfigError):
        embedder_for("triplet", small_model)


def test_baseline_embeds_with_base_features(small_model, rng):
    params = init_params(small_model, "baseline", seed=0)
    out = embedder_for("baseline", small_model)(rng.standard_normal((2, small_model.input_dim)), params)
    assert out.shape == (2, small_model.base_layers[-1])


def test_text_encode_shapes_and_errors(small_model):
    params = init_params(small_model, "vte", seed=0)
    h = text_encode([1, 2, 3], params, small_model).values
    assert h.shape == (small_model.lstm_hidden,)
    assert np.all(np.abs(h) < 1.0)
    with pytest.raises(InputError):
        text_encode([], params, small_model)
    with pytest.raises(InputError):
        text_encode([small_model.text_vocab_size], params, small_model)


def test_text_encode_batch_mixed_lengths_keeps_order(small_model):
    params = init_params(small_model, "vte", seed=0)
    seqs = [[1, 2, 3], [4], [5, 6], [7, 8, 9]]
    batch = text_encode_batch(seqs, params, small_model).values
    for k, s in enumerate(seqs):
        np.testing.assert_allclose(batch[k], text_encode(s, params, small_model).values, atol=1e-12)


def test_text_encode_is_order_sensitive(small_model):
    params = init_params(small_model, "vte", seed=0)
    a = text_encode([1, 2], params, small_model).values
    b = text_encode([2, 1], params, small_model).values
    assert not np.allclose(a, b)


def test_project_joint(small_model, rng):
    params = init_params(small_model, "vte", seed=0)
    v = project_joint(rng.standard_normal(small_model.base_layers[-1]), "visual", params).values
    t = project_joint(rng.standard_normal(small_model.lstm_hidden), "text", params).values
    assert v.shape == t.shape == (small_model.joint_dim,)
    with pytest.raises(ConfigError):
        project_joint(v, "audio", params)
    with pytest.raises(ShapeError):
        project_joint(np.zeros(small_model.lstm_hidden + 1), "text", params)


def test_text_encoder_gradients(small_model):
    params = init_params(small_model, "vte", seed=1)

    def loss(p):
        return ad.sum(ad.square(text_encode_batch([[1, 2, 3], [4, 5]], params, small_model)))

    result = ad.finite_difference_check(loss, params, n_samples=40)
    assert result.passed


def test_checkpoint_round_trip_is_bit_exact(small_model, tmp_path):
    params = init_params(small_model, "categorical", seed=5)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, small_model, params, "categorical", {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.variant == "categorical"
    assert ck.config == small_model
    assert ck.extras == {"note": "x"}
    assert ck.params.fingerprint() == params.fingerprint()
    save_checkpoint(tmp_path / "again.npz", ck.config, ck.params, ck.variant, ck.extras)
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(base_layers=[]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(embedding_dim=0).validate()
