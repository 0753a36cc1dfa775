import numpy as np
import pytest

from conftest import random_fixture
from vizrec.gradcheck import check_gradients, relu_margin
from vizrec.models import (
    ModelKind,
    Regularization,
    backward,
    default_tower_widths,
    forward,
    fused_backward,
    fused_forward,
    init_params,
    loss,
    loss_and_grad,
    mf_gradient,
    mf_loss,
    mf_predict,
    predict_batch,
    tensor_layout,
    vmf_gradient,
    vmf_loss,
    vmf_predict,
    vmlp_backward,
    vmlp_forward,
)
from vizrec.numeric import ShapeError, finite_difference_gradient

ALL_KINDS = list(ModelKind)


def zeros_like_model(kind, n_users=2, n_items=2, K=2, D=2, F=2, widths=(4,)):
    p = init_params(kind, n_users, n_items, K, D, F, widths)
    for t in p.tensors.values():
        t[...] = 0.0
    return p


class TestMF:
    def test_predict_examples(self):
        p = zeros_like_model("MF")
        assert mf_predict(p, 0, 1) == 0.0
        p["P"][0] = [1, 0]
        p["Q"][1] = [0.5, 2]
        assert mf_predict(p, 0, 1) == 0.5
        p3 = zeros_like_model("MF", K=3)
        p3["P"][1] = [1, 1, 1]
        p3["Q"][0] = [1, 2, 3]
        assert mf_predict(p3, 1, 0) == 6.0

    def test_index_out_of_range(self):
        p = zeros_like_model("MF")
        with pytest.raises(IndexError):
            mf_predict(p, 2, 0)
        with pytest.raises(IndexError):
            mf_predict(p, 0, -1)

    def test_loss_examples(self):
        p = zeros_like_model("MF")
        p["P"][0] = [1, 0]
        p["Q"][0] = [3, 0]
        assert mf_loss(p, [(0, 0, 3.0)], 0, 0) == 0.0
        assert mf_loss(p, [(0, 0, 4.0)], 0, 0) == 0.5
        one = zeros_like_model("MF", n_users=1, n_items=1, K=1)
        one["P"][0, 0] = 2.0
        assert mf_loss(one, [], 1.0, 0.0) == 2.0

    def test_gradient_examples(self):
        p = zeros_like_model("MF")
        p["P"][0] = [1, 0]
        p["Q"][0] = [3, 0]
        g = mf_gradient(p, [(0, 0, 3.0)], 0, 0)
        assert all(not v.any() for v in g.values())
        rng = np.random.default_rng(0)
        p["P"][:] = rng.normal(size=p["P"].shape)
        g = mf_gradient(p, [], 0.7, 0.0)
        np.testing.assert_array_equal(g["P"], 0.7 * p["P"])
        assert not g["Q"].any()

    def test_gradient_matches_fd_3x3(self):
        rng = np.random.default_rng(5)
        p = init_params("MF", 3, 3, 2, std=0.5, rng=rng)
        batch = [(u, i, float(rng.uniform(1, 5))) for u in range(3) for i in range(3)]
        g = mf_gradient(p, batch, 0.3, 0.2)
        num = finite_difference_gradient(lambda x: mf_loss(p.with_flat(x), batch, 0.3, 0.2), p.flatten())
        an = np.concatenate([g["P"].ravel(), g["Q"].ravel()])
        np.testing.assert_allclose(an, num, rtol=1e-5, atol=1e-8)


class TestVMF:
    def test_visual_term_vanishes(self):
        rng = np.random.default_rng(2)
        p = init_params("VMF", 3, 3, 2, 2, 4, std=1.0, rng=rng)
        mf = init_params("MF", 3, 3, 2)
        mf["P"], mf["Q"] = p["P"], p["Q"]
        f = rng.normal(size=4)
        assert vmf_predict(p, 1, 2, np.zeros(4)) == mf_predict(mf, 1, 2)
        p["Theta_u"][:] = 0
        assert vmf_predict(p, 1, 2, f) == mf_predict(mf, 1, 2)

    def test_hand_example(self):
        p = zeros_like_model("VMF", D=2, F=2)
        p["E"][:] = np.eye(2)
        p["Theta_u"][0] = [1, 2]
        p["P"][0] = [1, 0]
        p["Q"][0] = [1, 0]
        assert vmf_predict(p, 0, 0, [1, 1]) == 4.0

    def test_feature_dim_mismatch(self):
        p = zeros_like_model("VMF", D=2, F=2)
        with pytest.raises(ShapeError):
            vmf_predict(p, 0, 0, [1, 1, 1])

    def test_zero_visual_dim_reduces_to_mf(self):
        rng = np.random.default_rng(8)
        p = init_params("VMF", 4, 4, 3, 0, 5, std=1.0, rng=rng)
        mf = init_params("MF", 4, 4, 3)
        mf["P"], mf["Q"] = p["P"], p["Q"]
        f = rng.normal(size=5)
        for u in range(4):
            for i in range(4):
                assert vmf_predict(p, u, i, f) == mf_predict(mf, u, i)

    def test_loss_equals_mf_loss_without_visual(self):
        rng = np.random.default_rng(3)
        p = init_params("VMF", 2, 2, 2, 2, 4, std=1.0, rng=rng)
        p["Theta_u"][:] = 0
        mf = init_params("MF", 2, 2, 2)
        mf["P"], mf["Q"] = p["P"], p["Q"]
        batch = [(0, 1, 3.0), (1, 0, 4.5)]
        feats = rng.normal(size=(2, 4))
        assert vmf_loss(p, batch, feats, 0, 0) == mf_loss(mf, batch, 0, 0)

    def test_gradient_fd_2x2_f4_d2(self):
        rng = np.random.default_rng(4)
        p = init_params("VMF", 2, 2, 2, 2, 4, std=0.7, rng=rng)
        feats = rng.normal(size=(2, 4))
        batch = [(u, i, float(rng.uniform(1, 5))) for u in range(2) for i in range(2)]
        g = vmf_gradient(p, batch, feats, 0.1, 0.2)
        num = finite_difference_gradient(lambda x: vmf_loss(p.with_flat(x), batch, feats, 0.1, 0.2), p.flatten())
        an = np.concatenate([g[k].ravel() for k in p.tensors])
        np.testing.assert_allclose(an, num, rtol=1e-5, atol=1e-8)

    def test_perfect_fit(self):
        rng = np.random.default_rng(6)
        p = init_params("VMF", 2, 2, 2, 2, 3, std=1.0, rng=rng)
        feats = rng.normal(size=(2, 3))
        batch = [(u, i, vmf_predict(p, u, i, feats[i])) for u in range(2) for i in range(2)]
        assert vmf_loss(p, batch, feats, 0, 0) == 0.0
        g = vmf_gradient(p, batch, feats, 0, 0)
        assert all(not v.any() for v in g.values())


class TestVMLP:
    def test_zero_network(self):
        p = zeros_like_model("VMLP")
        y, _ = vmlp_forward(p, 0, 1, [0.3, -2.0])
        assert y == 0.0

    def test_transparent_relu(self):
        # K=1, D=1, F=1, one hidden layer of width 3 = identity on z_1
        p = zeros_like_model("VMLP", K=1, D=1, F=1, widths=(3,))
        p["W0"][:] = np.eye(3)
        p["h"][:] = 1.0
        p["E_v"][:] = 2.0
        p["P_v"][0] = 0.5
        p["Q_v"][1] = 1.25
        y, trace = vmlp_forward(p, 0, 1, [3.0])
        assert y == 0.5 + 1.25 + 6.0
        np.testing.assert_array_equal(trace.acts[0][0], [0.5, 1.25, 6.0])

    def test_residual_zero(self):
        p, users, items, ratings, feats, _ = random_fixture("VMLP", 0)
        _, trace = vmlp_forward(p, users[0], items[0], feats[0])
        g = vmlp_backward(p, trace, 0.0)
        assert all(not v.any() for v in g.values())

    def test_q_gradient_only_first_slots(self):
        p, users, items, ratings, feats, _ = random_fixture("VMLP", 1, K=2, D=2, widths=(6, 4))
        y, trace = vmlp_forward(p, users[0], items[0], feats[0])
        g = vmlp_backward(p, trace, 1.0)
        rows = np.flatnonzero(g["Q_v"].any(axis=1))
        assert set(rows) <= {items[0]}
        # Q_v gradient equals the item slots [K, 2K) of dL/dz_1; recompute it directly
        da = -1.0 * p["h"]
        for l in reversed(range(p.n_layers)):
            ds = da * (trace.pre[l][0] > 0)
            da = p[f"W{l}"] @ ds
        dz1 = da
        np.testing.assert_allclose(g["Q_v"][items[0]], dz1[2:4], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g["P_v"][users[0]], dz1[:2], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g["E_v"], np.outer(dz1[4:], feats[0]), rtol=1e-12, atol=1e-15)

    def test_gradient_fd_k2_d2_widths_6_4(self):
        for seed in range(5):
            p, users, items, ratings, feats, _ = random_fixture("VMLP", seed, K=2, D=2, widths=(6, 4))
            errs = check_gradients(p, users, items, ratings, feats)
            assert max(errs.values()) < 1e-5, errs

    def test_stale_trace(self):
        p, users, items, ratings, feats, _ = random_fixture("VMLP", 2)
        _, trace = vmlp_forward(p, users[0], items[0], feats[0])
        other = init_params("VMLP", 4, 5, 3, 2, 6, (5, 4))
        with pytest.raises(ShapeError):
            vmlp_backward(other, trace, 1.0)


class TestFused:
    def test_zero_params(self):
        p = zeros_like_model("MF-VMLP")
        y, _ = fused_forward(p, 1, 0, [1.0, 2.0])
        assert y == 0.0

    def test_degenerates_to_weighted_mf(self):
        p, users, items, ratings, feats, _ = random_fixture("MF-VMLP", 3)
        K = p.latent_dim
        p["h_out"][K:] = 0.0
        for u, i, f in zip(users, items, feats):
            y, _ = fused_forward(p, u, i, f)
            expect = float(np.sum(p["h_out"][:K] * p["P"][u] * p["Q"][i]))
            assert abs(y - expect) <= 1e-12

    def test_residual_zero(self):
        p, users, items, ratings, feats, _ = random_fixture("MF-VMLP", 4)
        _, trace = fused_forward(p, users[0], items[0], feats[0])
        assert all(not v.any() for v in fused_backward(p, trace, 0.0).values())

    def test_mf_half_k1(self):
        p = init_params("MF-VMLP", 1, 1, 1, 1, 1, (2,), std=1.0, rng=np.random.default_rng(0))
        p["P"][0, 0], p["Q"][0, 0], p["h_out"][0] = 2.0, 3.0, 0.5
        _, trace = fused_forward(p, 0, 0, [1.0])
        r = 1.7
        g = fused_backward(p, trace, r)
        # d(0.5 r^2)/dp = -r * h * q
        assert g["P"][0, 0] == pytest.approx(-r * 0.5 * 3.0, abs=1e-15)
        assert g["Q"][0, 0] == pytest.approx(-r * 0.5 * 2.0, abs=1e-15)

    def test_embeddings_disjoint(self):
        names = [n for n, _, _ in tensor_layout(ModelKind.MF_VMLP, 3, 3, 2, 2, 2, (4,))]
        assert {"P", "Q", "P_v", "Q_v"} <= set(names)
        p = init_params("MF-VMLP", 3, 3, 2, 2, 2, (4,), std=1.0)
        assert not np.shares_memory(p["P"], p["P_v"])


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.label)
@pytest.mark.parametrize("use_bias", [False, True])
class TestAllModels:
    def test_gradients_match_fd_over_seeds(self, kind, use_bias):
        worst = 0.0
        checked = 0
        for seed in range(25):
            p, users, items, ratings, feats, _ = random_fixture(kind, seed, use_bias=use_bias)
            if relu_margin(p, users, items, feats) < 1e-3:
                continue
            reg = Regularization(0.1 * (seed % 3), 0.05 * (seed % 2), 0.2 * (seed % 4))
            errs = check_gradients(p, users, items, ratings, feats, reg)
            worst = max(worst, max(errs.values()))
            checked += 1
        assert checked >= 20
        assert worst <= 1e-4

    def test_small_step_decreases_example_loss(self, kind, use_bias):
        for seed in range(10):
            p, users, items, ratings, feats, _ = random_fixture(kind, 100 + seed, use_bias=use_bias)
            u, i, y = users[:1], items[:1], ratings[:1]
            f = None if feats is None else feats[:1]
            before, g = loss_and_grad(p, u, i, y, f)
            if max(np.abs(v).max() for v in g.values() if v.size) < 1e-12:
                continue
            stepped = p.copy()
            for name in stepped.tensors:
                stepped.tensors[name] -= 1e-3 * g[name]
            assert loss(stepped, u, i, y, f) < before

    def test_batch_matches_single(self, kind, use_bias):
        p, users, items, ratings, feats, _ = random_fixture(kind, 7, use_bias=use_bias)
        batch = predict_batch(p, users, items, feats)
        for k in range(len(users)):
            single = predict_batch(p, users[k:k + 1], items[k:k + 1], None if feats is None else feats[k:k + 1])
            assert single[0] == pytest.approx(batch[k], rel=1e-12, abs=1e-14)

    def test_backward_rejects_bad_residual(self, kind, use_bias):
        p, users, items, ratings, feats, _ = random_fixture(kind, 9, use_bias=use_bias)
        trace = forward(p, users, items, feats)
        with pytest.raises(ShapeError):
            backward(p, trace, np.zeros(len(users) + 1))


def test_default_tower_pyramid():
    assert default_tower_widths(128) == (64, 32)
    assert default_tower_widths(3) == (1, 1)


def test_init_deterministic():
    a = init_params("MF-VMLP", 5, 6, 3, 2, 4, (6, 3), rng=np.random.default_rng(1))
    b = init_params("MF-VMLP", 5, 6, 3, 2, 4, (6, 3), rng=np.random.default_rng(1))
    for name in a.tensors:
        np.testing.assert_array_equal(a[name], b[name])


def test_visual_model_requires_features():
    p = init_params("VMF", 2, 2, 2, 2, 3)
    with pytest.raises(ShapeError):
        predict_batch(p, [0], [0])
