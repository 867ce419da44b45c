import numpy as np
import pytest

from hsi_adapter.spectral import SpectralTransformer, spectral_transform
from hsi_adapter.tensor import ShapeError, Tensor


def model(bands=6, seed=0, zero_band_embed=False, **kw):
    m = SpectralTransformer(bands, dim=8, heads=2, layers=2, mlp_ratio=2.0, **kw).initialize(seed)
    if zero_band_embed:
        m.band_embed.data[...] = 0.0
    return m.astype(np.float64)


def cube(rng, bands=6, h=3, w=4, b=1):
    return rng.standard_normal((b, bands, h, w))


class TestShapes:
    def test_three_channel_output_for_any_band_count(self, rng):
        for n in (1, 15, 25):
            out = model(n)(Tensor(cube(rng, n, 2, 3)))
            assert out.shape == (1, 3, 2, 3)

    def test_token_layout_is_pixel_major(self, rng):
        m = model()
        tok = m.band_embed_tokens(Tensor(cube(rng, b=2)))
        assert tok.shape == (2 * 3 * 4, 6, 8)

    def test_wrong_band_count(self, rng):
        with pytest.raises(ShapeError):
            model(6)(Tensor(cube(rng, 5)))

    def test_indivisible_heads(self):
        with pytest.raises(ShapeError):
            SpectralTransformer(4, dim=10, heads=4)


class TestPixelIndependence:
    def test_editing_one_pixel_changes_only_that_pixel(self, rng):
        m = model()
        x = cube(rng)
        y = x.copy()
        y[0, :, 1, 2] += rng.standard_normal(6)
        a, b = m(Tensor(x)).data, m(Tensor(y)).data
        changed = np.abs(a - b).max(axis=1)[0] > 0
        assert changed[1, 2] and changed.sum() == 1

    def test_identical_spectra_identical_output(self, rng):
        m = model()
        x = np.repeat(rng.standard_normal((1, 6, 1, 1)), 5, axis=3)
        out = m(Tensor(x)).data
        assert np.all(out == out[..., :1])

    def test_tiling_is_exact(self, rng):
        m = model().astype(np.float32)
        x = Tensor(cube(rng, h=7, w=5).astype(np.float32))
        whole = spectral_transform(m, x)
        for rows in (1, 2, 3):
            assert np.array_equal(spectral_transform(m, x, rows).data, whole.data)


class TestBandPermutation:
    def test_invariant_without_band_embeddings(self, rng):
        m = model(zero_band_embed=True)
        x = cube(rng)
        perm = rng.permutation(6)
        assert np.allclose(m(Tensor(x)).data, m(Tensor(x[:, perm])).data, atol=1e-12)

    def test_tokens_equivariant_without_band_embeddings(self, rng):
        m = model(zero_band_embed=True)
        x = cube(rng)
        perm = rng.permutation(6)
        t = m.encode(m.band_embed_tokens(Tensor(x))).data
        tp = m.encode(m.band_embed_tokens(Tensor(x[:, perm]))).data
        assert np.allclose(tp, t[:, perm], atol=1e-12)

    def test_not_invariant_with_band_embeddings(self, rng):
        m = model()
        m.band_embed.data[...] = rng.standard_normal(m.band_embed.shape)
        x = cube(rng)
        perm = np.roll(np.arange(6), 1)
        assert not np.allclose(m(Tensor(x)).data, m(Tensor(x[:, perm])).data)


def test_zero_input_with_zero_embeddings_gives_embed_bias_tokens(rng):
    m = model(zero_band_embed=True)
    m.embed.bias.data[...] = rng.standard_normal(8)
    tok = m.band_embed_tokens(Tensor(np.zeros((1, 6, 1, 1)))).data
    assert np.array_equal(tok[0], np.broadcast_to(m.embed.bias.data, (6, 8)))


def test_single_band_is_residual_chain(rng):
    m = model(1)
    x = cube(rng, 1)
    tok = m.band_embed_tokens(Tensor(x))
    # one token: attention weight is exactly 1, so the block is x + out(v(norm x)) + mlp(...)
    _, w = m.blocks[0].attn(m.blocks[0].norm1(tok), return_weights=True)
    assert np.all(w.data == 1.0)


def test_every_band_receives_gradient(rng):
    m = model(6)
    x = Tensor(cube(rng), requires_grad=True)
    (m(x) ** 2).sum().backward()
    per_band = np.sqrt((x.grad ** 2).sum(axis=(0, 2, 3)))
    assert np.all(per_band > 0)
