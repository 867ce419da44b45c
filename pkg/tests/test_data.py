import numpy as np
import pytest

from hsi_adapter.data import (
    CubeFormatError,
    HyperCube,
    SynthConfig,
    decode_cube,
    encode_cube,
    load_cube,
    random_crop,
    save_cube,
    synth_scene,
)


@pytest.fixture(scope="module")
def synth():
    return SynthConfig()


class TestSynthetic:
    def test_deterministic(self, synth):
        a, la = synth_scene(synth, 3)
        b, lb = synth_scene(synth, 3)
        assert np.array_equal(a.data, b.data) and np.array_equal(la, lb)

    def test_dark_bands_are_exactly_zero(self, synth):
        cube, _ = synth_scene(synth, 0)
        assert np.all(cube.data[list(synth.dark_bands)] == 0.0)

    def test_last_class_differs_only_at_ablation_band(self, synth):
        s = synth.signatures
        diff = np.flatnonzero(s[-1] != s[-2])
        assert diff.tolist() == [synth.ablation_band]
        assert s[-1, synth.ablation_band] - s[-2, synth.ablation_band] == pytest.approx(synth.bump)

    def test_labels_constant_on_cells(self, synth):
        _, lab = synth_scene(synth, 1)
        c = synth.cell
        assert np.array_equal(lab, np.repeat(np.repeat(lab[::c, ::c], c, 0), c, 1))

    def test_ablation_band_cannot_be_dark(self):
        with pytest.raises(ValueError):
            SynthConfig(ablation_band=0)

    def test_extent_must_be_cell_multiple(self):
        with pytest.raises(ValueError):
            SynthConfig(height=30)


class TestHSC1:
    def test_roundtrip_with_wavelengths(self, synth, tmp_path):
        cube, lab = synth_scene(synth, 2)
        save_cube(tmp_path / "s.hsc", cube, lab)
        back, lab2 = load_cube(tmp_path / "s.hsc")
        assert np.array_equal(back.data, cube.data)
        assert np.array_equal(back.wavelengths_nm, cube.wavelengths_nm)
        assert np.array_equal(lab2, lab)

    def test_roundtrip_without_wavelengths(self, rng):
        cube = HyperCube(rng.random((2, 3, 4)))
        back, lab = decode_cube(encode_cube(cube, np.ones((3, 4), np.uint8)))
        assert back.wavelengths_nm is None and np.array_equal(back.data, cube.data)
        assert lab.dtype == np.uint8

    def test_bad_magic(self):
        with pytest.raises(CubeFormatError) as err:
            decode_cube(b"HSC2" + bytes(20))
        assert err.value.offset == 0

    def test_truncated_and_trailing(self, rng):
        buf = encode_cube(HyperCube(rng.random((1, 2, 2))), np.zeros((2, 2), np.uint8))
        with pytest.raises(CubeFormatError):
            decode_cube(buf[:-1])
        with pytest.raises(CubeFormatError) as err:
            decode_cube(buf + b"x")
        assert err.value.offset == len(buf)

    def test_unknown_flag(self, rng):
        buf = bytearray(encode_cube(HyperCube(rng.random((1, 1, 1))), np.zeros((1, 1), np.uint8)))
        buf[16] = 4
        with pytest.raises(CubeFormatError) as err:
            decode_cube(bytes(buf))
        assert err.value.offset == 16

    def test_label_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            encode_cube(HyperCube(rng.random((1, 2, 2))), np.zeros((3, 2)))

    def test_decreasing_wavelengths_rejected(self, rng):
        with pytest.raises(ValueError):
            HyperCube(rng.random((2, 1, 1)), np.array([700.0, 600.0]))


class TestCrop:
    def test_cube_and_labels_stay_aligned(self):
        cube = np.zeros((3, 40, 40), np.float32)
        lab = np.zeros((40, 40), np.uint8)
        cube[:, 21, 17] = 1.0
        lab[21, 17] = 7
        for seed in range(30):
            c, l = random_crop(cube, lab, (24, 24), seed, align=4)
            assert np.array_equal(c[0] == 1.0, l == 7)

    def test_corners_are_aligned(self):
        cube = np.arange(64 * 64, dtype=np.float32).reshape(1, 64, 64)
        for seed in range(20):
            c, _ = random_crop(cube, np.zeros((64, 64)), (16, 16), seed, align=4)
            y, x = divmod(int(c[0, 0, 0]), 64)
            assert y % 4 == 0 and x % 4 == 0

    def test_full_size_crop_is_identity(self, rng):
        cube = rng.random((2, 8, 12)).astype(np.float32)
        lab = rng.integers(0, 5, (8, 12))
        c, l = random_crop(cube, lab, (8, 12), rng)
        assert np.array_equal(c, cube) and np.array_equal(l, lab)

    def test_small_image_is_padded(self, rng):
        c, l = random_crop(rng.random((1, 5, 5)), np.zeros((5, 5)), (8, 8), 0)
        assert c.shape == (1, 8, 8) and l.shape == (8, 8)
