"""Shared pytest fixtures: src/ on sys.path, seeded generators, small models."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from datasets import make_blobs  # noqa: E402
from model import Classifier, ModelConfig  # noqa: E402
from rbf_head import KernelConfig  # noqa: E402


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cnn_config():
    """Small conv backbone on 8x8 inputs, float64 for exact checks."""
    return ModelConfig(
        arch="mnist_cnn",
        input_shape=(1, 8, 8),
        num_classes=3,
        clusters=4,
        embedding_dim=5,
        conv_channels=(2, 3),
        kernel=KernelConfig(kind="quadratic", sigma=2.0),
        precision="float64",
    )


@pytest.fixture
def tiny_cnn(tiny_cnn_config):
    return Classifier.build(tiny_cnn_config, np.random.default_rng(7))


@pytest.fixture
def blobs():
    return make_blobs(20, 3, 2, 0.02, np.random.default_rng(3))


@pytest.fixture
def blob_model_config():
    return ModelConfig(
        arch="mlp",
        input_shape=(1, 1, 2),
        num_classes=3,
        clusters=3,
        embedding_dim=4,
        hidden=8,
        kernel=KernelConfig(kind="quadratic", sigma=1.0),
        metric_mode="full",
        precision="float64",
    )
