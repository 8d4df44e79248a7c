import numpy as np
import pytest
import torch

from vicregl import losses, verify
from vicregl.verify import collapse_monitor, finite_diff_check, run_suite


class _FlipGrad(torch.autograd.Function):
    """Identity forward, negated backward."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return -g


class TestFiniteDiff:
    def test_quadratic(self, rng):
        err = finite_diff_check(lambda t: (t["x"] ** 2).sum(), {"x": rng.normal(size=(4, 3))})
        assert err < 1e-8

    def test_detects_wrong_gradient(self, rng):
        err = finite_diff_check(lambda t: _FlipGrad.apply((t["x"] ** 3).sum()), {"x": rng.normal(size=5)})
        assert err > 1.0

    def test_sampled_and_directional(self, rng):
        err = finite_diff_check(lambda t: (t["x"].sin() * t["y"]).sum(),
                                {"x": rng.normal(size=(6, 6)), "y": rng.normal(size=(6, 6))},
                                max_coords=5, directions=3, rng=rng)
        assert err < 1e-6

    def test_sampling_needs_rng(self, rng):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: t["x"].sum(), {"x": np.ones(3)}, max_coords=1)

    def test_vicreg_small_batches(self, rng):
        err = finite_diff_check(lambda t: losses.vicreg_loss(t["z"], t["z2"]).total,
                                {"z": rng.normal(size=(4, 6)) * 0.6, "z2": rng.normal(size=(4, 6)) * 0.6})
        assert err < 1e-4

    def test_multicrop_tiny_instance(self):
        ok, detail = verify.grad_multicrop(n=2)
        assert ok, detail


class TestCollapseMonitor:
    def test_constant_batch(self):
        assert collapse_monitor(np.full((10, 4), 3.0)) == (0.0, 0.0)

    def test_unit_gaussian(self, rng):
        lo, mean = collapse_monitor(rng.normal(size=(10_000, 16)))
        assert 0.97 <= mean <= 1.03 and lo > 0.95


class TestSuite:
    def test_filter_by_group(self):
        names = [r.name for r in run_suite("loss")]
        assert names == ["loss_values", "alpha_one", "degenerate_multicrop"]

    def test_mutated_covariance_gradient_fails(self, monkeypatch):
        real = losses.covariance_term
        monkeypatch.setattr(losses, "covariance_term", lambda z: _FlipGrad.apply(real(z)))
        results = run_suite("grad_vicreg")
        assert len(results) == 1 and not results[0].passed

    def test_crashing_check_is_failure(self, monkeypatch):
        def boom():
            raise RuntimeError("boom")
        monkeypatch.setattr(verify, "CHECKS", [("boom", "x", boom)])
        (result,) = run_suite()
        assert not result.passed and "boom" in result.detail
