import numpy as np
import pytest
import torch
from torch import nn

from simcount import ShapeMismatchError
from simcount.counter import RegressionHead, pool_correlation

from oracles import pool_correlation_oracle


class TestPoolCorrelation:
    def test_matches_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            c = int(rng.integers(2, 6))
            h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            feats = rng.normal(size=(2, c, h, w)).astype(np.float32) * 0.5
            sim = rng.normal(size=(2, h, w)).astype(np.float32) * 0.5
            got = pool_correlation(torch.from_numpy(feats), torch.from_numpy(sim))
            want = pool_correlation_oracle(feats, sim)
            np.testing.assert_allclose(got.numpy(), want, atol=1e-5, rtol=0)

    def test_output_shape_is_resolution_independent(self):
        for h, w in ((2, 2), (6, 4), (9, 9)):
            out = pool_correlation(torch.rand(3, 5, h, w), torch.rand(3, h, w))
            assert out.shape == (3, 5)

    def test_linear_in_similarity(self):
        torch.manual_seed(0)
        feats = torch.rand(1, 4, 3, 3)
        sim = torch.rand(1, 3, 3)
        np.testing.assert_allclose(
            pool_correlation(feats, 2 * sim).numpy(),
            (2 * pool_correlation(feats, sim)).numpy(),
            atol=1e-6,
            rtol=0,
        )

    def test_uniform_similarity_reduces_to_spatial_sum(self):
        feats = torch.rand(2, 4, 3, 3)
        sim = torch.ones(2, 3, 3)
        np.testing.assert_allclose(
            pool_correlation(feats, sim).numpy(),
            feats.sum(dim=(2, 3)).numpy(),
            atol=1e-5,
            rtol=0,
        )

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatchError):
            pool_correlation(torch.rand(1, 4, 3, 3), torch.rand(1, 4, 4))
        with pytest.raises(ShapeMismatchError):
            pool_correlation(torch.rand(2, 4, 3, 3), torch.rand(1, 3, 3))


class TestRegressionHead:
    def test_output_shape(self):
        torch.manual_seed(0)
        head = RegressionHead(8)
        out = head(torch.rand(5, 8))
        assert out.shape == (5,)

    def test_default_widths(self):
        head = RegressionHead(16)
        linears = [m for m in head.net if isinstance(m, nn.Linear)]
        assert [m.out_features for m in linears] == [64, 32, 1]
        relus = [m for m in head.net if isinstance(m, nn.ReLU)]
        assert len(relus) == 2
        assert not isinstance(head.net[-1], nn.ReLU)

    def test_output_unconstrained(self):
        # no activation after the last layer, so negative counts are possible
        torch.manual_seed(0)
        head = RegressionHead(4, (8, 1))
        with torch.no_grad():
            head.net[-1].bias.fill_(-100.0)
            out = head(torch.rand(3, 4))
        assert (out < 0).all()

    def test_matches_manual_affine_chain(self):
        torch.manual_seed(1)
        head = RegressionHead(4, (3, 1)).eval()
        x = torch.rand(2, 4)
        w0, b0 = head.net[0].weight, head.net[0].bias
        w1, b1 = head.net[2].weight, head.net[2].bias
        with torch.no_grad():
            hidden = torch.relu(x @ w0.T + b0)
            want = (hidden @ w1.T + b1).squeeze(-1)
            got = head(x)
        np.testing.assert_allclose(got.numpy(), want.numpy(), atol=1e-6, rtol=0)
