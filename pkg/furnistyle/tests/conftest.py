# furnistyle/tests/conftest.py
"""Shared fixtures: small synthetic datasets and model / training configs."""

import numpy as np
import pytest

from furnistyle.curation import split
from furnistyle.losses import LossConfig
from furnistyle.models import ModelConfig
from furnistyle.synthetic import SynthSpec, build_vocabulary, generate
from furnistyle.training import TrainingConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return SynthSpec(num_styles=4, num_types=3, items_per_cell=10, feature_dim=16, seed=0)


@pytest.fixture
def small_items(small_spec):
    """4 styles x 3 types x 10 items, split 68:12:20 per cell."""
    return split(generate(small_spec).items, seed=0)


@pytest.fixture
def small_model(small_spec):
    return ModelConfig(
        input_dim=small_spec.feature_dim,
        base_layers=[12, 8],
        embedding_dim=6,
        num_styles=small_spec.num_styles,
        num_types=small_spec.num_types,
        text_vocab_size=build_vocabulary(small_spec).size,
        token_embed_dim=6,
        lstm_hidden=5,
        joint_dim=6,
    )


@pytest.fixture
def fast_training():
    return TrainingConfig(
        stage1_lr=0.01,
        stage1_iterations=10,
        stage2_lr=0.001,
        epochs=2,
        batch_size=16,
        vte_steps_per_epoch=5,
        vte_batches_per_step=2,
        seed=0,
    )


@pytest.fixture
def loss_config():
    return LossConfig(m_contrastive=2.0, m_rank=0.1)
