# furnistyle/tests/test_synthetic.py
import numpy as np
import pytest

from furnistyle.dataset import feature_matrix, validate_items
from furnistyle.errors import ConfigError
from furnistyle.evaluation import nearest_centroid_accuracy, roc_auc
from furnistyle.synthetic import (
    SynthSpec,
    build_vocabulary,
    dataset_meta,
    generate,
    generate_images,
    inject_duplicates,
    item_id,
    plant_outliers,
)


def _centroid_auc(items, num_styles):
    """AUC of -distance-to-style-centroid at separating an item's own style from the others."""
    X = feature_matrix(items)
    y = np.array([it.style for it in items])
    centroids = np.stack([X[y == s].mean(axis=0) for s in range(num_styles)])
    d = np.sqrt(np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=2))
    labels = (y[:, None] == np.arange(num_styles)[None, :]).astype(int)
    return roc_auc(-d.reshape(-1), labels.reshape(-1))


def test_zero_noise_cells_are_identical():
    data = generate(SynthSpec(num_styles=3, num_types=2, items_per_cell=5, feature_dim=8, noise_sigma=0.0))
    cells = {}
    for it in data.items:
        cells.setdefault((it.style, it.furniture_type), []).append(it.features)
    assert len(cells) == 6
    for rows in cells.values():
        for r in rows[1:]:
            np.testing.assert_array_equal(r, rows[0])


def test_same_seed_same_dataset():
    spec = SynthSpec(num_styles=3, num_types=2, items_per_cell=4, feature_dim=8, seed=9)
    assert generate(spec).items == generate(spec).items
    other = generate(SynthSpec(num_styles=3, num_types=2, items_per_cell=4, feature_dim=8, seed=10))
    assert other.items != generate(spec).items


def test_generated_items_are_valid(small_spec):
    data = generate(small_spec)
    validate_items(data.items, small_spec.feature_dim, small_spec.num_styles, small_spec.num_types)
    assert len(data.items) == 4 * 3 * 10
    assert data.items[0].id == item_id(0, 0, 0) == "s00-t0-0000"
    vocab = data.vocab
    assert all(max(it.tokens) < vocab.size for it in data.items)
    meta = dataset_meta(small_spec)
    assert meta["vocab_size"] == vocab.size and meta["input_dim"] == 16


def test_tokens_carry_style_and_type():
    spec = SynthSpec(num_styles=5, num_types=3, items_per_cell=6, feature_dim=4)
    data = generate(spec)
    vocab = build_vocabulary(spec)
    for it in data.items:
        assert len(it.tokens) == 4
        assert it.tokens[2] == vocab.type_word(it.furniture_type)
        assert vocab.style_of_token(it.tokens[3]) == it.style
        assert all(vocab.style_of_token(t) is None for t in it.tokens[:3])


def test_centroid_recovers_styles():
    spec = SynthSpec(num_styles=6, num_types=3, items_per_cell=20, feature_dim=16, seed=1)
    items = generate(spec).items
    X = feature_matrix(items)
    y = [it.style for it in items]
    assert nearest_centroid_accuracy(X, y, X, y) >= 0.99


def test_style_signal_is_a_monotone_difficulty_knob():
    aucs = []
    for signal in (0.1, 0.5, 2.0):
        spec = SynthSpec(num_styles=8, num_types=3, items_per_cell=20, feature_dim=16, style_signal=signal, seed=4)
        aucs.append(_centroid_auc(generate(spec).items, spec.num_styles))
    assert aucs[0] <= aucs[1] <= aucs[2]
    assert aucs[2] > 0.95


def test_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(num_styles=1).validate()
    with pytest.raises(ConfigError):
        SynthSpec(noise_sigma=-0.1).validate()
    with pytest.raises(ConfigError):
        SynthSpec(image_size=4).validate()


# ─── Images and corruption ──────────────────────────────────────────
def test_images_and_duplicate_injection(small_spec):
    items = generate(small_spec).items
    images = generate_images(small_spec, items)
    assert set(images) == {it.id for it in items}
    img = images[items[0].id]
    assert img.shape == (64, 64)
    assert img.min() >= 0.0 and img.max() < 100.0
    out_items, out_images, truth = inject_duplicates(items, images, 2, 2, 2, small_spec.num_styles, seed=0)
    assert len(out_items) == len(items) + 6
    for orig, copy in truth.same_style:
        np.testing.assert_array_equal(out_images[orig], out_images[copy])
    for orig, copy in truth.scaled:
        np.testing.assert_array_equal(out_images[copy], 2.0 * out_images[orig])
    by_id = {it.id: it for it in out_items}
    for orig, copy in truth.cross_style:
        assert by_id[orig].style != by_id[copy].style
    with pytest.raises(ConfigError):
        inject_duplicates(items, images, len(items), 1, 0, small_spec.num_styles)


def test_plant_outliers_mislabels_features(small_spec):
    items = generate(small_spec).items
    out, planted = plant_outliers(items, 5, small_spec, seed=1)
    assert len(planted) == 5
    by_id = {it.id: it for it in out}
    originals = {it.id: it for it in items}
    for pid in planted:
        assert by_id[pid].furniture_type == originals[pid].furniture_type
        assert not np.array_equal(by_id[pid].features, originals[pid].features)
    untouched = [it.id for it in items if it.id not in planted]
    assert all(by_id[i] == originals[i] for i in untouched)
    with pytest.raises(ConfigError):
        plant_outliers(items, len(items) + 1, small_spec)
