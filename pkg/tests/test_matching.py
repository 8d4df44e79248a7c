import numpy as np
import pytest
import torch

from vicregl.geometry import CropRect, PositionGrid, position_grid
from vicregl.matching import (MatchSet, batch_matches, feature_match, location_match,
                              pairwise_distances, top_gamma)
from vicregl.verify import (exhaustive_feature_match, exhaustive_location_match,
                            exhaustive_top_gamma, match_feature, match_location, match_top_gamma)


def _triples(m: MatchSet):
    return [(int(s), int(d), float(x)) for s, d, x in zip(m.src, m.dst, m.dist)]


class TestLocationMatch:
    def test_identical_grids(self):
        g = position_grid(CropRect(3, 4, 30, 20), (3, 5))
        m = location_match(g, g)
        np.testing.assert_array_equal(m.dst, np.arange(15))
        np.testing.assert_array_equal(m.dist, 0.0)

    def test_shifted_one_by_two(self):
        a = position_grid(CropRect(0, 0, 100, 100), (1, 2))
        b = position_grid(CropRect(50, 0, 100, 100), (1, 2))
        m = location_match(a, b)
        assert m.pairs == [((0, 0), (0, 0), 50.0), ((0, 1), (0, 0), 0.0)]

    def test_matches_oracle(self, rng):
        for _ in range(200):
            ha, wa, hb, wb = rng.integers(1, 8, 4)
            a = PositionGrid(rng.uniform(0, 64, (ha, wa, 2)))
            b = PositionGrid(rng.uniform(0, 64, (hb, wb, 2)))
            want = exhaustive_location_match(a.coords, b.coords)
            got = _triples(location_match(a, b))
            assert [g[:2] for g in got] == [w[:2] for w in want]
            np.testing.assert_allclose([g[2] for g in got], [w[2] for w in want], rtol=1e-12)

    def test_tie_goes_to_lowest_index(self):
        a = PositionGrid(np.array([[[0.0, 1.0]]]))
        b = PositionGrid(np.array([[[0.0, 0.0], [0.0, 2.0]]]))
        assert location_match(a, b).dst.tolist() == [0]

    def test_suite(self):
        ok, detail = match_location(n=200)
        assert ok, detail


class TestFeatureMatch:
    def test_identity(self, rng):
        z = rng.normal(size=(4, 3, 3))
        m = feature_match(z, z)
        np.testing.assert_array_equal(m.dst, np.arange(9))
        np.testing.assert_array_equal(m.dist, 0.0)

    def test_swapped_cells(self):
        # cells as (D=2, H=1, W=2): a = {(1,0), (0,1)}, b = {(0,1), (1,0)}
        z_a = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        z_b = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
        m = feature_match(z_a, z_b)
        assert m.dst.tolist() == [1, 0]
        np.testing.assert_array_equal(m.dist, 0.0)

    def test_mixed_resolution_oracle(self, rng):
        for _ in range(100):
            z_a, z_b = rng.normal(size=(5, 7, 7)), rng.normal(size=(5, 3, 3))
            for src, dst in ((z_a, z_b), (z_b, z_a)):
                want = exhaustive_feature_match(src, dst)
                got = _triples(feature_match(src, dst))
                assert [g[:2] for g in got] == [w[:2] for w in want]
                np.testing.assert_allclose([g[2] for g in got], [w[2] for w in want], rtol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            feature_match(rng.normal(size=(3, 2, 2)), rng.normal(size=(4, 2, 2)))

    def test_normalized_matching_ignores_scale(self, rng):
        z = rng.normal(size=(4, 3, 3))
        m = feature_match(z * 5.0, z, normalize=True)
        np.testing.assert_array_equal(m.dst, np.arange(9))

    def test_suite(self):
        ok, detail = match_feature(n=200)
        assert ok, detail


class TestTopGamma:
    def test_gamma_exceeds_size(self):
        m = MatchSet(np.arange(3), np.array([2, 0, 1]), np.array([3.0, 1.0, 2.0]), (1, 3), (1, 3))
        kept = top_gamma(m, 10)
        assert len(kept) == 3
        np.testing.assert_array_equal(kept.dist, [1.0, 2.0, 3.0])

    def test_keeps_smallest(self):
        m = MatchSet(np.arange(2), np.array([0, 0]), np.array([50.0, 0.0]), (1, 2), (1, 2))
        kept = top_gamma(m, 1)
        assert kept.pairs == [((0, 1), (0, 0), 0.0)]

    def test_twenty_of_forty_nine(self, rng):
        z_a, z_b = rng.normal(size=(8, 7, 7)), rng.normal(size=(8, 7, 7))
        m = feature_match(z_a, z_b)
        kept = top_gamma(m, 20)
        assert len(kept) == 20
        dropped = np.setdiff1d(m.src, kept.src)
        assert kept.dist.max() <= m.dist[dropped].min()

    def test_oracle_with_ties(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 30))
            dist = rng.integers(0, 5, n).astype(float)
            m = MatchSet(np.arange(n), rng.integers(0, n, n), dist, (1, n), (1, n))
            gamma = int(rng.integers(1, 35))
            assert _triples(top_gamma(m, gamma)) == exhaustive_top_gamma(_triples(m), gamma)

    def test_gamma_zero_rejected(self):
        m = MatchSet(np.arange(1), np.zeros(1, int), np.zeros(1), (1, 1), (1, 1))
        with pytest.raises(ValueError):
            top_gamma(m, 0)

    def test_suite(self):
        ok, detail = match_top_gamma(n=200)
        assert ok, detail


class TestBatched:
    def test_pairwise_distances_exact(self, rng):
        a = torch.tensor(rng.normal(size=(2, 6, 3)))
        b = torch.tensor(rng.normal(size=(2, 4, 3)))
        ref = np.sqrt(((a.numpy()[:, :, None] - b.numpy()[:, None]) ** 2).sum(-1))
        np.testing.assert_allclose(pairwise_distances(a, b).numpy(), ref, rtol=1e-14)

    def test_batch_matches_agree_with_single(self, rng):
        z_a, z_b = rng.normal(size=(3, 4, 3, 3)), rng.normal(size=(3, 4, 2, 2))
        src = torch.tensor(z_a).flatten(2).transpose(1, 2)
        dst = torch.tensor(z_b).flatten(2).transpose(1, 2)
        s_idx, d_idx, dist = batch_matches(src, dst, 4)
        for i in range(3):
            single = top_gamma(feature_match(z_a[i], z_b[i]), 4)
            np.testing.assert_array_equal(s_idx[i].numpy(), single.src)
            np.testing.assert_array_equal(d_idx[i].numpy(), single.dst)
            np.testing.assert_allclose(dist[i].numpy(), single.dist, rtol=1e-14)
