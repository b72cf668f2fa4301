import numpy as np
import pytest
import torch
from torch import nn

from simcount import FeatureBranch, ModelConfig, PseudoSiameseBackbone, ShapeMismatchError


@pytest.fixture(scope="module")
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture(scope="module")
def backbone(tiny_cfg):
    torch.manual_seed(0)
    return PseudoSiameseBackbone(tiny_cfg).eval()


class TestFeatureBranch:
    def test_output_shape_and_stride(self):
        torch.manual_seed(0)
        branch = FeatureBranch((4, 4, 8, 8))
        assert branch.stride == 16
        assert branch.out_channels == 8
        out = branch(torch.rand(2, 3, 64, 96))
        assert out.shape == (2, 8, 4, 6)

    def test_two_stage_branch(self):
        torch.manual_seed(0)
        branch = FeatureBranch((2, 4))
        assert branch.stride == 4
        assert branch(torch.rand(1, 3, 8, 8)).shape == (1, 4, 2, 2)

    def test_eval_forward_is_deterministic(self):
        torch.manual_seed(0)
        branch = FeatureBranch((4, 8)).eval()
        x = torch.rand(2, 3, 16, 16)
        with torch.no_grad():
            a = branch(x)
            b = branch(x)
        assert torch.equal(a, b)

    def test_nonnegative_outputs(self):
        # final activation clips at zero
        torch.manual_seed(1)
        branch = FeatureBranch((4, 8)).eval()
        with torch.no_grad():
            out = branch(torch.rand(2, 3, 32, 32))
        assert (out >= 0).all()


class TestPseudoSiameseBackbone:
    def test_main_features_shape(self, backbone, tiny_cfg):
        x = torch.rand(2, 3, 96, 64)
        feats = backbone.extract_main_features(x)
        assert feats.shape == (2, tiny_cfg.channels, 6, 4)

    def test_main_rejects_indivisible_size(self, backbone):
        with pytest.raises(ShapeMismatchError):
            backbone.extract_main_features(torch.rand(1, 3, 50, 64))

    def test_rejects_wrong_channel_count(self, backbone):
        with pytest.raises(ShapeMismatchError):
            backbone.extract_main_features(torch.rand(1, 1, 64, 64))
        with pytest.raises(ShapeMismatchError):
            backbone.extract_exemplar_features(torch.rand(3, 64, 64))

    def test_exemplar_grid_is_fixed(self, backbone, tiny_cfg):
        g = tiny_cfg.exemplar_grid
        for size in ((96, 96), (128, 128), (64, 160)):
            feats = backbone.extract_exemplar_features(torch.rand(1, 3, *size))
            assert feats.shape == (1, tiny_cfg.channels, g, g)

    def test_exemplar_identity_skip_when_sized(self, backbone, tiny_cfg):
        size = tiny_cfg.exemplar_input_size
        x = torch.rand(1, 3, size, size)
        with torch.no_grad():
            via_api = backbone.extract_exemplar_features(x)
            direct = backbone.exemplar_branch(x)
        assert torch.equal(via_api, direct)

    def test_branches_do_not_share_parameters(self, backbone):
        main_ids = {id(p) for p in backbone.main_branch.parameters()}
        ex_ids = {id(p) for p in backbone.exemplar_branch.parameters()}
        assert main_ids.isdisjoint(ex_ids)
        w_main = backbone.main_branch.stages[0].weight
        w_ex = backbone.exemplar_branch.stages[0].weight
        assert not torch.equal(w_main, w_ex)

    def test_training_one_branch_leaves_other_unchanged(self, tiny_cfg):
        torch.manual_seed(0)
        bb = PseudoSiameseBackbone(tiny_cfg)
        before = [p.detach().clone() for p in bb.exemplar_branch.parameters()]
        opt = torch.optim.SGD(bb.main_branch.parameters(), lr=0.1)
        loss = bb.extract_main_features(torch.rand(1, 3, 32, 32)).sum()
        loss.backward()
        opt.step()
        after = list(bb.exemplar_branch.parameters())
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_without_exemplar_branch(self, tiny_cfg):
        torch.manual_seed(0)
        bb = PseudoSiameseBackbone(tiny_cfg, with_exemplar=False)
        assert bb.exemplar_branch is None
        with pytest.raises(ShapeMismatchError):
            bb.extract_exemplar_features(torch.rand(1, 3, 64, 64))

    def test_custom_branch_injection(self, tiny_cfg):
        class Stub(nn.Module):
            def forward(self, x):
                b = x.shape[0]
                return torch.ones(b, 8, x.shape[-2] // 16, x.shape[-1] // 16)

        bb = PseudoSiameseBackbone(tiny_cfg, main_branch=Stub())
        out = bb.extract_main_features(torch.rand(2, 3, 32, 32))
        np.testing.assert_allclose(out.numpy(), 1.0)
