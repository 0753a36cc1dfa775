import json

import numpy as np
import pytest

from vizrec.dataset import SplitDataset
from vizrec.synthgen import SynthConfig, generate
from vizrec.training import TrainConfig, train


def whole(ds):
    a, none = np.arange(len(ds)), np.array([], dtype=np.int64)
    return SplitDataset(ds.subset(a), ds.subset(none), ds.subset(none), (a, none, none))


class TestGenerate:
    def test_deterministic(self):
        a = generate(SynthConfig(n_users=50, n_items=60, seed=4))
        b = generate(SynthConfig(n_users=50, n_items=60, seed=4))
        np.testing.assert_array_equal(a[0].ratings, b[0].ratings)
        np.testing.assert_array_equal(a[0].users, b[0].users)
        assert a[2].to_json() == b[2].to_json()
        assert all(np.array_equal(a[1].vectors[k], b[1].vectors[k]) for k in a[1].vectors)

    def test_seed_changes_data(self):
        a = generate(SynthConfig(n_users=50, n_items=60, seed=1))[0]
        b = generate(SynthConfig(n_users=50, n_items=60, seed=2))[0]
        assert len(a) != len(b) or not np.array_equal(a.ratings, b.ratings)

    def test_density(self):
        ds = generate(SynthConfig(n_users=200, n_items=300, density=0.1, seed=0))[0]
        n = 200 * 300
        assert abs(len(ds) - 0.1 * n) < 5 * np.sqrt(n * 0.1 * 0.9)

    def test_range_bound(self):
        cfg = SynthConfig(n_users=300, n_items=500, density=0.1, noise_std=0.3, visual_weight=0.6, seed=0)
        ds = generate(cfg)[0]
        assert len(ds) >= 10_000
        inside = (ds.ratings >= 1 - 3 * 0.3) & (ds.ratings <= 5 + 3 * 0.3)
        assert inside.mean() >= 0.99

    def test_noiseless_oracle(self):
        cfg = SynthConfig(n_users=40, n_items=50, noise_std=0.0, visual_weight=0.3, seed=3)
        ds, store, truth = generate(cfg)
        np.testing.assert_allclose(truth.noiseless(ds.users, ds.items), ds.ratings, rtol=0, atol=1e-12)
        # independent recomputation from the recorded factors
        u, i = 7, 11
        f = store.get(f"i{i}")
        raw = 0.7 * truth.P[u] @ truth.Q[i] / truth.mf_scale + 0.3 * truth.Theta_u[u] @ (truth.E @ f) / truth.vis_scale
        assert truth.noiseless(u, i)[0] == pytest.approx(1 + 4 * (raw - truth.lo) / (truth.hi - truth.lo), rel=1e-12)

    def test_features_exact_in_float32(self):
        store = generate(SynthConfig(n_users=10, n_items=10, seed=0))[1]
        for v in store.vectors.values():
            np.testing.assert_array_equal(v.astype(np.float32).astype(np.float64), v)

    def test_truth_json(self):
        truth = generate(SynthConfig(n_users=10, n_items=12, seed=0))[2]
        doc = json.loads(truth.to_json())
        assert np.array(doc["P"]).shape == (10, truth.config.K_true)
        assert doc["config"]["seed"] == 0

    @pytest.mark.parametrize("bad", [dict(density=0.0), dict(density=1.5), dict(noise_std=-1),
                                     dict(visual_weight=2.0), dict(n_users=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


class TestPlantedStructure:
    def test_no_visual_signal_features_irrelevant(self):
        # with visual_weight 0 the ratings do not depend on features at all
        a = generate(SynthConfig(n_users=60, n_items=80, visual_weight=0.0, noise_std=0.0, seed=5))
        u, i = np.meshgrid(np.arange(60), np.arange(80), indexing="ij")
        base = a[2].noiseless(u.ravel(), i.ravel())
        a[2].features[:] = np.random.default_rng(0).normal(size=a[2].features.shape)
        np.testing.assert_array_equal(a[2].noiseless(u.ravel(), i.ravel()), base)

    def test_pure_visual_noiseless_fit(self):
        cfg = SynthConfig(visual_weight=1.0, noise_std=0.0, seed=0)
        ds, store, _ = generate(cfg)
        tc = TrainConfig(model_kind="VMF", latent_dim=2, visual_dim=cfg.D_true, optimizer="adam",
                         learning_rate=0.01, batch_size=256, max_epochs=300, patience=10, use_bias=True)
        _, report = train(tc, whole(ds), store)
        assert report.best_valid_rmse < 0.05
