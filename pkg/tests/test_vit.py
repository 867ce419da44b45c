import numpy as np
import pytest

from hsi_adapter.tensor import ContractError, Tensor
from hsi_adapter.vit import (
    ViTBackbone,
    bicubic_matrix,
    detach_class_token,
    reattach_class_token,
    resample_pos_embed,
    set_frozen,
)


def vit(**kw):
    args = dict(dim=8, depth=4, heads=2, stages=((0, 0), (1, 1), (2, 2), (3, 3)), patch=14, pretrain_size=56)
    args.update(kw)
    return ViTBackbone(**args).initialize(0)


class TestBicubic:
    def test_identity_at_same_size(self):
        assert np.allclose(bicubic_matrix(5, 5, np.float64), np.eye(5))

    def test_rows_sum_to_one(self):
        assert np.allclose(bicubic_matrix(7, 13, np.float64).sum(axis=1), 1.0)

    def test_kernel_weights_at_half(self):
        # a = -0.75 cubic at offsets 1.5, 0.5, 0.5, 1.5
        m = bicubic_matrix(8, 4, np.float64)  # exact 2x downsample samples halfway
        assert np.allclose(m[1, 1:5], [-0.09375, 0.59375, 0.59375, -0.09375])

    def test_pos_embed_noop(self, rng):
        g = Tensor(rng.standard_normal((1, 4, 4, 3)))
        assert resample_pos_embed(g, (4, 4)) is g

    def test_pos_embed_constant_stays_constant(self):
        g = Tensor(np.full((1, 4, 4, 2), 0.7))
        assert np.allclose(resample_pos_embed(g, (6, 9)).data, 0.7)


class TestPatchEmbed:
    @pytest.mark.parametrize("hw,grid", [((224, 448), (16, 32)), ((230, 450), (17, 33)), ((28, 28), (2, 2))])
    def test_token_count(self, hw, grid):
        v = vit()
        st = v.patch_embed_forward(Tensor(np.zeros((1, 3, *hw), np.float32)))
        assert st.grid == grid
        assert st.tokens.shape == (1, 1 + grid[0] * grid[1], 8)
        assert st.padded_hw == (grid[0] * 14, grid[1] * 14)

    def test_rejects_non_rgb(self):
        with pytest.raises(ContractError):
            vit().patch_embed_forward(Tensor(np.zeros((1, 4, 28, 28), np.float32)))


class TestStages:
    def test_bad_partition(self):
        with pytest.raises(ContractError):
            ViTBackbone(dim=8, depth=4, heads=2, stages=((0, 1), (3, 3)))

    def test_stage_index_checked(self):
        v = vit()
        with pytest.raises(ContractError):
            v.run_stage(Tensor(np.zeros((1, 5, 8), np.float32)), 4)

    def test_record_has_one_entry_per_stage(self, rng):
        rec = []
        v = vit()
        v(Tensor(rng.random((1, 3, 28, 28)).astype(np.float32)), rec)
        assert len(rec) == 4

    def test_class_token_roundtrip(self, rng):
        t = Tensor(rng.standard_normal((2, 5, 3)))
        patches, cls = detach_class_token(t)
        assert patches.shape == (2, 4, 3)
        assert np.array_equal(reattach_class_token(patches, cls).data, t.data)


def test_frozen_parameters_get_no_gradient(rng):
    v = vit()
    set_frozen(v)
    img = Tensor(rng.random((1, 3, 28, 28)).astype(np.float32), requires_grad=True)
    (v(img).tokens ** 2).sum().backward()
    assert img.grad is not None
    assert all(p.grad is None and not p.requires_grad for p in v.parameters())
