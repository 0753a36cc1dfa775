import numpy as np
import pytest

from vizrec.models import ModelKind, init_params


def random_fixture(kind, seed, n_users=4, n_items=5, K=3, D=2, F=6, widths=(8, 4), n=12,
                   use_bias=False, std=0.5):
    """Small random model plus a batch of (user, item, rating, feature-row) examples."""
    kind = ModelKind.parse(kind)
    rng = np.random.default_rng(seed)
    params = init_params(kind, n_users, n_items, K, D, F, widths, use_bias, std=std, rng=rng)
    users = rng.integers(0, n_users, n)
    items = rng.integers(0, n_items, n)
    ratings = rng.uniform(1, 5, n)
    feature_matrix = rng.normal(size=(n_items, F))
    feats = feature_matrix[items] if kind.visual else None
    return params, users, items, ratings, feats, feature_matrix


@pytest.fixture
def fixture_factory():
    return random_fixture
