import os
import shutil

import numpy as np
import pytest

from app.config import get_settings
from app.services.embedding_store import EmbeddingSet

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "..", "fixtures", "synthetic")


@pytest.fixture(autouse=True)
def _settings(monkeypatch, tmp_path):
    monkeypatch.setenv("REPMETRIC_THREADS", "2")
    monkeypatch.setenv("REPMETRIC_UPLOAD_DIR", str(tmp_path / "uploads"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def make_set():
    """Factory for EmbeddingSets with zero-padded ids (so id order equals row order)."""
    def build(matrix, tag="model", labels=None, ids=None, normalized=False):
        matrix = np.asarray(matrix, dtype=np.float64)
        if ids is None:
            ids = [f"s{i:05d}" for i in range(matrix.shape[0])]
        return EmbeddingSet(tag, tuple(ids), matrix, labels=labels, normalized=normalized)

    return build


@pytest.fixture
def blobs(rng):
    """Labelled Gaussian blobs around scaled basis vectors: (train_x, train_y, test_x, test_y)."""
    def build(num_classes=3, dims=8, n_train=40, n_test=20, spread=10.0, sigma=1.0):
        centers = np.eye(dims)[:num_classes] * spread
        train_y = np.repeat(np.arange(num_classes), n_train)
        test_y = np.repeat(np.arange(num_classes), n_test)
        train_x = centers[train_y] + rng.normal(scale=sigma, size=(len(train_y), dims))
        test_x = centers[test_y] + rng.normal(scale=sigma, size=(len(test_y), dims))
        return train_x, train_y, test_x, test_y

    return build


@pytest.fixture
def fixture_project(tmp_path):
    """Copy of the bundled synthetic project; returns the path of its config.json."""
    target = tmp_path / "synthetic"
    shutil.copytree(FIXTURE_DIR, target)
    return str(target / "config.json")
