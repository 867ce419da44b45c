import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsi_adapter import tensor as T
from hsi_adapter.tensor import ContractError, ShapeError, Tensor, finite_diff_grad, no_grad, tensor_create

from conftest import leaf


class TestCreation:
    def test_non_float_input_becomes_float32(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.zeros(2, np.float64)).dtype == np.float64

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            tensor_create((2, 0))

    def test_uniform_is_seeded(self):
        a = tensor_create((3, 4), "uniform", seed=5, lo=-2, hi=2)
        b = tensor_create((3, 4), "uniform", seed=5, lo=-2, hi=2)
        assert np.array_equal(a.data, b.data)
        assert a.data.min() >= -2 and a.data.max() < 2

    def test_trunc_normal_bounded(self):
        t = tensor_create((2000,), "trunc_normal", seed=0, std=0.02)
        assert np.abs(t.data).max() <= 0.04

    def test_unknown_init(self):
        with pytest.raises(ValueError):
            tensor_create((2,), "xavier")


class TestBackward:
    def test_fanout_accumulates(self):
        x = leaf([1.0, 2.0, 3.0])
        (x * x + x).sum().backward()
        assert np.allclose(x.grad, 2 * x.data + 1)

    def test_non_scalar_needs_seed(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            (x * 2).backward()

    def test_intermediate_grad_only_when_retained(self):
        x = leaf([1.0, -1.0])
        h = x * 3
        k = (x * 2).retain_grad()
        (h + k).sum().backward()
        assert h.grad is None
        assert np.array_equal(k.grad, [1.0, 1.0])

    def test_broadcast_gradient_reduced(self):
        a = leaf(np.ones((2, 3)))
        b = leaf(np.ones((3,)))
        (a * b).sum().backward()
        assert b.grad.shape == (3,)
        assert np.array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2
        assert not y.requires_grad and y.is_leaf

    def test_matmul_known_values(self):
        a = leaf([[1.0, 2.0], [3.0, 4.0]])
        b = leaf([[5.0], [6.0]])
        out = a @ b
        assert np.array_equal(out.data, [[17.0], [39.0]])
        out.sum().backward()
        assert np.array_equal(a.grad, [[5.0, 6.0], [5.0, 6.0]])
        assert np.array_equal(b.grad, [[4.0], [6.0]])

    def test_getitem_scatter(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        x[:, 1].sum().backward()
        assert np.array_equal(x.grad, [[0, 1, 0], [0, 1, 0]])

    def test_split_concat_roundtrip(self):
        x = leaf(np.arange(10.0).reshape(2, 5))
        parts = T.split(x, [2, 3], axis=1)
        back = T.concat(parts[::-1], axis=1)
        assert back.shape == (2, 5)
        (back * Tensor(np.arange(10.0).reshape(2, 5).astype(np.float32))).sum().backward()
        assert np.array_equal(x.grad[:, :2], [[3, 4], [8, 9]])

    def test_pad_gradient_crops(self):
        x = leaf(np.ones((2, 2)))
        T.pad(x, [(1, 0), (0, 2)], value=7.0).sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 2)))


class TestFiniteDifference:
    def test_matches_closed_form(self):
        x = leaf([0.3, -1.2, 2.0])
        est = finite_diff_grad(lambda t: (t * t * t).sum(), x, eps=1e-5)
        assert np.allclose(est, 3 * np.array([0.3, -1.2, 2.0]) ** 2, atol=1e-8)
        assert x.dtype == np.float32

    def test_coordinate_subset(self):
        x = leaf(np.arange(5.0))
        est = finite_diff_grad(lambda t: (t * t).sum(), x, coords=[1, 4])
        assert est.shape == (2,)
        assert np.allclose(est, [2.0, 8.0])

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: t.sum(), leaf([1.0]), eps=0.0)


finite = st.floats(-10, 10, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (3, 4), elements=finite), arrays(np.float32, (4,), elements=finite))
def test_sub_grad_is_minus_one(a, b):
    x, y = leaf(a), leaf(b)
    (x - y).sum().backward()
    assert np.array_equal(x.grad, np.ones_like(a))
    assert np.array_equal(y.grad, -3 * np.ones_like(b))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-5, 5)), st.permutations([0, 1, 2]))
def test_transpose_grad_is_inverse_permutation(a, perm):
    x = leaf(a, np.float64)
    g = np.random.default_rng(0).standard_normal(np.transpose(a, perm).shape)
    (T.transpose(x, tuple(perm)) * Tensor(g)).sum().backward()
    assert np.array_equal(x.grad, np.transpose(g, np.argsort(perm)))
