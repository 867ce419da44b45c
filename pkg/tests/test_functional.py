"""Fast primitives against the brute-force loops in ``nn.reference`` and hand-computed values."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsi_adapter.nn import functional as F
from hsi_adapter.nn import reference as R
from hsi_adapter.tensor import ShapeError, Tensor

from conftest import grad_of, leaf


def t64(a):
    return Tensor(np.asarray(a, np.float64))


class TestFrozenValues:
    def test_softmax_two_way(self):
        out = F.softmax(t64([[0.0, math.log(2.0)]])).data
        assert np.allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_layer_norm_three_values(self):
        out = F.layer_norm(t64([[1.0, 2.0, 3.0]]), t64(np.ones(3)), t64(np.zeros(3)), eps=0.0).data
        assert np.allclose(out, [[-math.sqrt(1.5), 0.0, math.sqrt(1.5)]], atol=1e-12)

    def test_bilinear_matrix_upsample_two_to_four(self):
        m = F.bilinear_matrix(2, 4, np.float64)
        assert np.allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])

    def test_adaptive_pool_overlapping_bins(self):
        m = F.adaptive_pool_matrix(5, 3, np.float64)
        assert np.allclose(m, [[.5, .5, 0, 0, 0], [0, 1 / 3, 1 / 3, 1 / 3, 0], [0, 0, 0, .5, .5]])

    def test_cross_entropy_uniform_logits(self):
        loss = F.cross_entropy(t64(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), np.int64))
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-14)

    def test_gelu_tanh_form_at_one(self):
        expected = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
        assert F.gelu(t64([1.0])).data[0] == pytest.approx(expected, abs=1e-15)

    def test_max_pool_picks_maximum(self):
        x = t64(np.arange(16.0).reshape(1, 1, 4, 4))
        assert np.array_equal(F.max_pool2d(x, 2, 2, 0).data[0, 0], [[5, 7], [13, 15]])


class TestAgainstLoops:
    def test_conv2d_grouped_strided(self, rng):
        x = rng.standard_normal((2, 4, 7, 6))
        w = rng.standard_normal((6, 2, 3, 3))
        b = rng.standard_normal(6)
        got = F.conv2d(t64(x), t64(w), t64(b), stride=2, padding=1, groups=2).data
        assert np.allclose(got, R.conv2d(x, w, b, 2, 1, 2), atol=1e-12)

    def test_conv_transpose(self, rng):
        x = rng.standard_normal((1, 3, 4, 5))
        w = rng.standard_normal((3, 2, 2, 2))
        b = rng.standard_normal(2)
        got = F.conv_transpose2d(t64(x), t64(w), t64(b), stride=2).data
        assert got.shape == (1, 2, 8, 10)
        assert np.allclose(got, R.conv_transpose2d(x, w, b, 2), atol=1e-12)

    def test_max_pool_padded(self, rng):
        x = rng.standard_normal((2, 3, 9, 8))
        assert np.array_equal(F.max_pool2d(t64(x), 3, 2, 1).data, R.max_pool2d(x, 3, 2, 1))

    def test_layer_norm(self, rng):
        x, g, b = rng.standard_normal((3, 5, 8)), rng.standard_normal(8), rng.standard_normal(8)
        assert np.allclose(F.layer_norm(t64(x), t64(g), t64(b)).data, R.layer_norm(x, g, b), atol=1e-12)

    def test_softmax_inner_axis(self, rng):
        x = rng.standard_normal((3, 4, 5)) * 5
        assert np.allclose(F.softmax(t64(x), axis=1).data, R.softmax(x, axis=1), atol=1e-14)

    def test_attention(self, rng):
        D, heads = 8, 2
        q_in, kv_in = rng.standard_normal((1, 5, D)), rng.standard_normal((1, 7, D))
        ws = [rng.standard_normal((D, D)) * 0.3 for _ in range(4)]
        bs = [rng.standard_normal(D) * 0.1 for _ in range(4)]
        q = F.linear(t64(q_in), t64(ws[0]), t64(bs[0]))
        k = F.linear(t64(kv_in), t64(ws[1]), t64(bs[1]))
        v = F.linear(t64(kv_in), t64(ws[2]), t64(bs[2]))
        out, weights = F.scaled_dot_attention(q, k, v, heads)
        out = F.linear(out, t64(ws[3]), t64(bs[3])).data[0]
        ref = R.multi_head_attention(q_in[0], kv_in[0], ws[0], bs[0], ws[1], bs[1], ws[2], bs[2], ws[3], bs[3], heads)
        assert np.allclose(out, ref, atol=1e-12)
        assert np.allclose(weights.data.sum(-1), 1.0)

    def test_cross_entropy_with_ignore(self, rng):
        logits = rng.standard_normal((2, 5, 3, 4)) * 3
        labels = rng.integers(0, 5, (2, 3, 4))
        labels[0, 0, :2] = F.IGNORE_LABEL
        got = F.cross_entropy(t64(logits), labels).item()
        assert got == pytest.approx(R.cross_entropy(logits, labels), abs=1e-12)

    def test_bilinear_sample(self, rng):
        value = rng.standard_normal((1, 3, 4, 6))
        pts = rng.uniform(-0.2, 1.2, (1, 40, 2))
        got = F.bilinear_sample(t64(value), t64(pts)).data[0]
        ref = np.stack([R.bilinear_sample(value[0], x, y) for x, y in pts[0]])
        assert np.allclose(got, ref, atol=1e-12)


class TestGradients:
    def test_batch_norm_train_grad_sums_to_zero_over_batch(self, rng):
        x = rng.standard_normal((4, 3, 2, 2))
        rm, rv = np.zeros(3), np.ones(3)

        def f(x, g, b):
            return F.batch_norm(x, g, b, rm, rv, training=True)

        _, (gx, _, gb), probe = grad_of(f, x, np.ones(3), np.zeros(3))
        assert np.allclose(gx.sum(axis=(0, 2, 3)), 0.0, atol=1e-12)
        assert np.allclose(gb, probe.sum(axis=(0, 2, 3)))

    def test_bilinear_sample_point_gradient_linear_in_cell(self):
        value = np.array([[[0.0, 1.0], [0.0, 1.0]]])[None]  # ramp along x
        v, p = leaf(value, np.float64), leaf([[[0.5, 0.5]]], np.float64)
        F.bilinear_sample(v, p).sum().backward()
        assert p.grad[0, 0] == pytest.approx([2.0, 0.0])  # d/dx of (x*W - 0.5) over one cell

    def test_gate_blend_gamma_grad(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        gam = rng.uniform(0, 1, (2, 3, 1))
        _, (ga, gbb, gg), probe = grad_of(F.gate_blend, a, b, gam)
        assert np.allclose(gg, (probe * (b - a)).sum(-1, keepdims=True))
        assert np.allclose(ga + gbb, probe)


class TestErrors:
    def test_label_out_of_range(self):
        with pytest.raises(F.LabelError):
            F.cross_entropy(t64(np.zeros((1, 3, 1, 1))), np.array([[[3]]]))

    def test_all_ignored_warns_and_is_zero(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss = F.cross_entropy(t64(np.zeros((1, 3, 1, 2))), np.full((1, 1, 2), 255))
        assert loss.item() == 0.0
        assert any(issubclass(w.category, F.AllIgnoredWarning) for w in caught)

    def test_heads_must_divide(self):
        x = t64(np.zeros((1, 2, 6)))
        with pytest.raises(ShapeError):
            F.scaled_dot_attention(x, x, x, 4)

    def test_level_spec_rejects_empty_level(self):
        with pytest.raises(ShapeError):
            F.LevelSpec(((2, 2), (0, 3)))


def test_level_spec_offsets():
    spec = F.LevelSpec(((4, 8), (2, 4), (1, 2)))
    assert spec.offsets == (0, 32, 40, 42)
    assert spec.total == 42 and len(spec) == 3


def test_reference_points_are_cell_centres():
    pts = F.make_reference_points(F.LevelSpec(((1, 2),)))
    assert np.allclose(pts, [[0.25, 0.5], [0.75, 0.5]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9))
def test_resize_matrix_rows_are_convex(n_in, n_out):
    m = F.bilinear_matrix(n_in, n_out, np.float64)
    assert np.allclose(m.sum(axis=1), 1.0)
    assert (m >= 0).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12))
def test_adaptive_pool_preserves_mean_of_constant(n_in, n_out):
    m = F.adaptive_pool_matrix(n_in, n_out, np.float64)
    assert np.allclose(m @ np.full(n_in, 3.5), 3.5)
