import numpy as np
import pytest

from moetune.data import make_synthetic_dataset
from moetune.model import ModelConfig


def central_diff(f, tensor, indices, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. ``tensor.values[idx]``."""
    out = []
    for idx in indices:
        old = tensor.values[idx]
        tensor.values[idx] = old + eps
        up = f()
        tensor.values[idx] = old - eps
        down = f()
        tensor.values[idx] = old
        out.append((up - down) / (2 * eps))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def sample_indices(shape, n, rng):
    flat = rng.choice(int(np.prod(shape)), size=min(n, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(
        embedding_size=64, width=16, layers=2, ffn_size=24, heads=2, experts=4, top_k=2,
        pseudo_image_tokens=4, image_feature_dim=8, vision_dim=8, max_seq_len=16,
    )


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return make_synthetic_dataset(
        3, P=small_config.pseudo_image_tokens, feature_dim=small_config.image_feature_dim,
        n_values=8, n_train=128, n_eval=32,
    )
