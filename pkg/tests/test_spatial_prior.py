import numpy as np
import pytest

from hsi_adapter.nn.functional import LevelSpec
from hsi_adapter.spatial_prior import SpatialPrior, flatten_map, unflatten_seq
from hsi_adapter.tensor import ShapeError, Tensor


def prior(bands=5, dim=8):
    return SpatialPrior(bands, dim, stem=8, widths=(8, 16, 16)).initialize(0)


class TestPyramid:
    @pytest.mark.parametrize("hw", [(64, 128), (32, 32), (50, 70)])
    def test_levels_at_quarter_to_thirty_second(self, rng, hw):
        pyr = prior()(Tensor(rng.standard_normal((2, 5, *hw)).astype(np.float32)))
        Hp, Wp = pyr.padded_hw
        assert Hp % 32 == 0 and Wp % 32 == 0 and pyr.input_hw == hw
        for c, s in zip((pyr.c1, pyr.c2, pyr.c3, pyr.c4), (4, 8, 16, 32)):
            assert c.shape == (2, 8, Hp // s, Wp // s)
        assert pyr.spec.levels == ((Hp // 8, Wp // 8), (Hp // 16, Wp // 16), (Hp // 32, Wp // 32))
        assert pyr.spm_seq.shape == (2, pyr.spec.total, 8)

    def test_224_by_448_gives_56_by_112(self, rng):
        p = SpatialPrior(25, 8, stem=4, widths=(4, 4, 4)).initialize(0)
        pyr = p(Tensor(rng.random((1, 25, 224, 448)).astype(np.float32)))
        assert pyr.c1.shape[2:] == (56, 112)

    def test_filter_preserves_resolution(self, rng):
        f = prior().spectral_filter(Tensor(rng.random((1, 5, 9, 11)).astype(np.float32)))
        assert f.shape == (1, 8, 9, 11)

    def test_band_mismatch(self, rng):
        with pytest.raises(ShapeError):
            prior(5)(Tensor(np.zeros((1, 4, 32, 32), np.float32)))


def test_flatten_roundtrip(rng):
    spec = LevelSpec(((4, 6), (2, 3), (1, 2)))
    maps = [Tensor(rng.standard_normal((2, 3, h, w))) for h, w in spec.levels]
    from hsi_adapter.tensor import concat

    seq = concat([flatten_map(m) for m in maps], axis=1)
    back = unflatten_seq(seq, spec)
    for a, b in zip(maps, back):
        assert np.array_equal(a.data, b.data)


def test_flatten_is_row_major():
    x = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
    assert np.array_equal(flatten_map(x).data[0, :, 0], np.arange(6.0))


def test_unflatten_length_checked(rng):
    with pytest.raises(ShapeError):
        unflatten_seq(Tensor(np.zeros((1, 5, 2))), LevelSpec(((2, 2),)))


def test_gradient_reaches_every_stage(rng):
    p = prior()
    pyr = p(Tensor(rng.random((2, 5, 32, 32)).astype(np.float32)))
    (pyr.spm_seq ** 2).sum().backward()
    (pyr.c1 ** 2).sum().backward()
    for name, prm in p.named_parameters():
        assert prm.grad is not None and np.abs(prm.grad).sum() > 0, name
