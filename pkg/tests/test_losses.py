import itertools

import numpy as np
import pytest
import torch

from vicregl import losses
from vicregl.geometry import CropRect, position_grid
from vicregl.losses import (LossBreakdown, View, VicregWeights, covariance_term, invariance_term,
                            local_loss, total_loss_multicrop, total_loss_two_view, variance_term,
                            vicreg_loss, view_pairs)
from vicregl.matching import MatchSet, feature_match, location_match, top_gamma
from vicregl.verify import (loop_covariance, loop_invariance, loop_variance, loop_vicreg,
                            two_view_instance)


def T(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


class TestInvariance:
    def test_equal_inputs(self, rng):
        z = T(rng.normal(size=(5, 3)))
        assert float(invariance_term(z, z)) == 0.0

    def test_hand_value(self):
        assert float(invariance_term(T([[0, 0]]), T([[2, 0]]))) == 2.0

    def test_loop_oracle(self, rng):
        z, z2 = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
        np.testing.assert_allclose(float(invariance_term(T(z), T(z2))), loop_invariance(z, z2), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            invariance_term(T(np.zeros((3, 2))), T(np.zeros((3, 3))))


class TestVariance:
    def test_constant_batch(self):
        np.testing.assert_allclose(float(variance_term(T(np.full((6, 4), 0.7)))), 0.99, atol=1e-9)

    def test_hinge_inactive(self):
        assert float(variance_term(T([[0.0], [2.0]]))) == 0.0

    def test_bounds_and_oracle(self, rng):
        for _ in range(50):
            z = rng.normal(size=(int(rng.integers(2, 9)), 3)) * rng.uniform(0, 2)
            v = float(variance_term(T(z)))
            assert 0.0 <= v <= 0.99 + 1e-12
            np.testing.assert_allclose(v, loop_variance(z), rtol=1e-12, atol=1e-15)

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            variance_term(T([[1.0, 2.0]]))


class TestCovariance:
    def test_single_dim(self, rng):
        assert float(covariance_term(T(rng.normal(size=(5, 1))))) == 0.0

    def test_hand_value(self):
        np.testing.assert_allclose(float(covariance_term(T([[1, 1], [-1, -1]]))), 4.0, atol=1e-9)

    def test_orthogonal_columns(self):
        z = T([[1, 1], [1, -1], [-1, 1], [-1, -1]])
        assert float(covariance_term(z)) == 0.0

    def test_loop_oracle(self, rng):
        z = rng.normal(size=(6, 5))
        np.testing.assert_allclose(float(covariance_term(T(z))), loop_covariance(z), rtol=1e-12)


class TestVicregLoss:
    def test_collapsed_batch(self):
        z = T(np.full((4, 3), 0.2))
        np.testing.assert_allclose(float(vicreg_loss(z, z).total), 49.5, atol=1e-9)

    def test_symmetric(self, rng):
        z, z2 = T(rng.normal(size=(5, 4))), T(rng.normal(size=(5, 4)))
        assert float(vicreg_loss(z, z2).total) == pytest.approx(float(vicreg_loss(z2, z).total), rel=1e-14)

    def test_zero_weights(self, rng):
        z, z2 = T(rng.normal(size=(5, 4))), T(rng.normal(size=(5, 4)))
        assert float(vicreg_loss(z, z2, VicregWeights(0, 0, 0)).total) == 0.0

    def test_loop_oracle(self, rng):
        z, z2 = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        np.testing.assert_allclose(float(vicreg_loss(T(z), T(z2)).total), loop_vicreg(z, z2), rtol=1e-12)

    def test_breakdown_reconstructs(self, rng):
        bd = vicreg_loss(T(rng.normal(size=(5, 4))), T(rng.normal(size=(5, 4))))
        assert bd.reconstruct() == pytest.approx(float(bd.total), rel=1e-12)
        assert set(bd.as_dict()) == set(LossBreakdown.TERMS)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            VicregWeights(-1.0, 25.0, 1.0)


class TestLocalLoss:
    def test_identical_collapsed(self):
        z = T(np.full((3, 4, 2, 2), 0.5))
        ms = [MatchSet(np.arange(4), np.arange(4), np.zeros(4), (2, 2), (2, 2))] * 3
        np.testing.assert_allclose(float(local_loss(z, z, ms)), 49.5, atol=1e-9)

    def test_identical_views_zero_invariance(self, rng):
        z = rng.normal(size=(3, 4, 2, 2))
        grid = position_grid(CropRect(0, 0, 16, 16), (2, 2))
        ms = [location_match(grid, grid)] * 3
        w = VicregWeights(1.0, 0.0, 0.0)
        assert float(local_loss(T(z), T(z), ms, w)) == 0.0

    def test_gather_oracle(self, rng):
        z_a, z_b = rng.normal(size=(3, 5, 3, 3)), rng.normal(size=(3, 5, 2, 2))
        ms = [top_gamma(feature_match(z_a[i], z_b[i]), 4) for i in range(3)]
        rows_a = [z_a[i][:, s // 3, s % 3] for i, m in enumerate(ms) for s in m.src]
        rows_b = [z_b[i][:, d // 2, d % 2] for i, m in enumerate(ms) for d in m.dst]
        want = loop_vicreg(np.array(rows_a), np.array(rows_b))
        np.testing.assert_allclose(float(local_loss(T(z_a), T(z_b), ms)), want, rtol=1e-12)

    def test_too_few_pairs(self, rng):
        z = T(rng.normal(size=(1, 3, 2, 2)))
        m = MatchSet(np.arange(1), np.arange(1), np.zeros(1), (2, 2), (2, 2))
        with pytest.raises(ValueError):
            local_loss(z, z, [m])


def _tensors(point):
    return {k: T(v) for k, v in point.items()}


class TestTwoView:
    def test_alpha_one_is_global(self, rng):
        point, grids = two_view_instance(rng)
        t = _tensors(point)
        bd = total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], *grids, alpha=1.0, gamma=4)
        assert torch.equal(bd.total, vicreg_loss(t["g_a"], t["g_b"]).total)
        assert float(bd.local_location) > 0 and float(bd.local_feature) > 0

    def test_swap_symmetry(self, rng):
        point, grids = two_view_instance(rng)
        t = _tensors(point)
        ab = total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], grids[0], grids[1], 0.75, 5)
        ba = total_loss_two_view(t["z_b"], t["z_a"], t["g_b"], t["g_a"], grids[1], grids[0], 0.75, 5)
        assert float(ab.total) == pytest.approx(float(ba.total), rel=1e-13)

    def test_hand_composition(self):
        # two-cell maps (B=2, D=2, 1x2), crops offset by half a cell
        z_a = T([[[[1.0, 0.0]], [[0.0, 1.0]]], [[[0.5, -1.0]], [[2.0, 0.0]]]])
        z_b = T([[[[0.0, 1.0]], [[1.0, 0.5]]], [[[1.0, 0.0]], [[-1.0, 0.3]]]])
        g_a, g_b = T([[1.0, 0.0], [0.0, 2.0]]), T([[0.5, 0.5], [1.0, -1.0]])
        ga = [position_grid(CropRect(0, 0, 16, 16), (1, 2))] * 2
        gb = [position_grid(CropRect(4, 0, 16, 16), (1, 2))] * 2
        w = VicregWeights()

        def vic(rows_a, rows_b):
            return loop_vicreg(np.array(rows_a), np.array(rows_b))

        def cell(z, b, j):
            return z[b, :, 0, j].numpy()

        # location: a0 (col 4) -> b0 (col 8); a1 (col 12) -> b0 (col 8) tie -> b0; b0 (8) -> a0 or a1 at
        # equal distance 4 -> a0; b1 (16) -> a1 (12)
        loc = 0.0
        for src, dst, pairs in ((z_a, z_b, [(0, 0), (1, 0)]), (z_b, z_a, [(0, 0), (1, 1)])):
            rows_s = [cell(src, b, i) for b in range(2) for i, _ in pairs]
            rows_d = [cell(dst, b, j) for b in range(2) for _, j in pairs]
            loc += vic(rows_s, rows_d)
        feat = 0.0
        for src, dst in ((z_a, z_b), (z_b, z_a)):
            rows_s, rows_d = [], []
            for b in range(2):
                for i in range(2):
                    d = [np.linalg.norm(cell(src, b, i) - cell(dst, b, j)) for j in range(2)]
                    rows_s.append(cell(src, b, i))
                    rows_d.append(cell(dst, b, int(np.argmin(d))))
            feat += vic(rows_s, rows_d)
        glob = vic(g_a.numpy(), g_b.numpy())
        want = 0.75 * glob + 0.25 * (loc + feat)
        bd = total_loss_two_view(z_a, z_b, g_a, g_b, ga, gb, alpha=0.75, gamma=2, w=w)
        np.testing.assert_allclose(float(bd.local_location), loc, rtol=1e-12)
        np.testing.assert_allclose(float(bd.local_feature), feat, rtol=1e-12)
        np.testing.assert_allclose(float(bd.total), want, rtol=1e-12)

    def test_disabled_terms(self, rng):
        point, grids = two_view_instance(rng)
        t = _tensors(point)
        bd = total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], *grids, 0.5, 4,
                                 use_location=False, use_feature=False)
        assert float(bd.local_location) == 0.0 and float(bd.local_feature) == 0.0
        assert bd.location_weight == 0.0 and bd.feature_weight == 0.0
        assert float(bd.total) == pytest.approx(0.5 * float(bd.global_vicreg), rel=1e-14)
        eff = bd.effective_weights()
        assert eff["local_location"] == eff["local_feature"] == 0.0
        assert eff["invariance"] == 0.5 * 25.0

    def test_effective_weights_rebuild_total(self, rng):
        point, grids = two_view_instance(rng)
        t = _tensors(point)
        bd = total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], *grids, 0.75, 4,
                                 VicregWeights(25.0, 0.0, 1.0))
        parts = bd.as_dict()
        rebuilt = sum(v * parts[k] for k, v in bd.effective_weights().items())
        assert bd.effective_weights()["variance"] == 0.0
        np.testing.assert_allclose(rebuilt, parts["total"], rtol=1e-12)

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_invalid_alpha(self, rng, alpha):
        point, grids = two_view_instance(rng)
        t = _tensors(point)
        with pytest.raises(ValueError):
            total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], *grids, alpha=alpha)


def _multicrop_views(rng, n_small=3, batch=4, dim=6, emb=5):
    views = []
    for v in range(2 + n_small):
        hw, size = (7, 224) if v < 2 else (3, 96)
        crop = CropRect(*rng.uniform(0, 20, 2), 180.0, 180.0, bool(rng.random() < 0.5), size, size)
        grids = T(np.stack([position_grid(crop, (hw, hw)).coords for _ in range(batch)]))
        views.append(View(T(rng.normal(size=(batch, dim, hw, hw))), grids,
                          T(rng.normal(size=(batch, emb))), v < 2))
    return views


class TestMulticrop:
    def test_two_views_reduce_to_two_view(self, rng):
        for _ in range(20):
            point, grids = two_view_instance(rng)
            t = _tensors(point)
            views = [View(t["z_a"], grids[0], t["g_a"], True), View(t["z_b"], grids[1], t["g_b"], True)]
            two = total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], *grids, 0.6, 5)
            multi = total_loss_multicrop(views, 0.6, 5, 2)
            np.testing.assert_allclose(float(multi.total), float(two.total), rtol=1e-12)

    def test_pair_sizes(self, rng, monkeypatch):
        sizes = []
        real = losses.local_loss

        def spy(z_a, z_b, matches, w=None):
            sizes.append((z_a.shape[-1], z_b.shape[-1], matches[0].shape[1]))
            return real(z_a, z_b, matches, w)

        monkeypatch.setattr(losses, "local_loss", spy)
        total_loss_multicrop(_multicrop_views(rng, n_small=2), 0.75, 20, 4)
        for src_w, dst_w, kept in sizes:
            assert kept == (20 if src_w == dst_w == 7 else 4)
        # 5 pairs x 2 directions x 2 matchers
        assert len(sizes) == 20

    def test_small_view_order_invariant(self, rng):
        views = _multicrop_views(rng)
        base = float(total_loss_multicrop(views, 0.75, 20, 4).total)
        for perm in itertools.permutations(views[2:]):
            got = float(total_loss_multicrop(views[:2] + list(perm), 0.75, 20, 4).total)
            assert got == pytest.approx(base, rel=1e-12)

    def test_view_pairs(self):
        assert view_pairs([True, True, False, False]) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]

    def test_requires_two_large(self, rng):
        views = _multicrop_views(rng, n_small=1)
        with pytest.raises(ValueError):
            total_loss_multicrop([views[0], views[2]], 0.75)
