import numpy as np
import pytest

from hsi_adapter import gradcheck as G
from hsi_adapter.tensor import make_result


def wrong_square(x):
    # forward x^2, backward claims 3x
    return make_result(x.data ** 2, (x,), lambda g: (3.0 * x.data * g,), "wrong_square")


class TestRelErr:
    def test_zero_for_equal(self):
        assert G.rel_err(np.ones(3), np.ones(3)) == 0.0

    def test_relative_to_numeric(self):
        assert G.rel_err(np.array([3.0, 4.0]), np.zeros(2)) == 5.0
        assert G.rel_err(np.array([1.1, 0.0]), np.array([1.0, 0.0])) == pytest.approx(0.1)


class TestSampling:
    def test_small_inputs_take_everything(self, rng):
        got = G._sample_coords([3, 4], 100, rng)
        assert [len(c) for c in got] == [3, 4]

    def test_exact_count_without_duplicates(self, rng):
        got = G._sample_coords([50, 80, 30], 100, rng)
        assert sum(len(c) for c in got) == 100
        assert all(len(np.unique(c)) == len(c) and (c.min(initial=0) >= 0) for c in got)
        assert all(c.max(initial=-1) < s for c, s in zip(got, [50, 80, 30]))


def test_detects_wrong_backward(rng):
    res = G.check_function("wrong", [rng.standard_normal(120)], wrong_square)
    assert not res.passed and res.err64 > 0.1


def test_accepts_correct_backward(rng):
    res = G.check_function("square", [rng.standard_normal(120)], lambda x: x * x)
    assert res.passed


@pytest.mark.parametrize("name", ["softmax", "layer_norm", "conv2d", "ms_deform_attn"])
def test_registered_ops(name):
    if name not in G.OPS:
        pytest.skip(f"{name} not registered")
    res = G.check_op(name)
    assert res.coords >= G.MIN_COORDS and res.passed, res


def test_registry_is_broad():
    assert len(G.OPS) >= 25


def test_format_marks_failures():
    text = G.format_results([G.CheckResult("a", 1.0, 0.0, 200), G.CheckResult("b", 0.0, 0.0, 200)])
    lines = text.splitlines()
    assert lines[1].endswith("FAIL") and lines[2].endswith("ok")
