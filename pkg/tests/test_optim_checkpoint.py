import struct

import numpy as np
import pytest

from hsi_adapter.checkpoint import (
    FormatError,
    WeightImportError,
    decode_ntw,
    encode_ntw,
    import_weights,
    load_ntw,
    save_model,
)
from hsi_adapter.nn.layers import BatchNorm2d, Linear
from hsi_adapter.nn.module import Module
from hsi_adapter.optim import ModelParams, OptimState, cosine_warmup_lr, global_grad_norm, optimizer_step
from hsi_adapter.tensor import ContractError


class Tiny(Module):
    def __init__(self):
        self.fc = Linear(3, 2)
        self.bn = BatchNorm2d(2)


def tiny(seed=0):
    return Tiny().initialize(seed)


class TestAdamW:
    def test_first_step_hand_value(self):
        m = Linear(1, 1, bias=False).initialize(0)
        m.weight.data[...] = 0.5
        m.weight.grad = np.array([[0.2]], np.float32)
        state = OptimState(1e-3, weight_decay=0.0)
        optimizer_step(ModelParams.from_module(m), state, 1e-3)
        # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
        assert m.weight.data[0, 0] == pytest.approx(0.5 - 1e-3 * 0.2 / (0.2 + 1e-8), abs=1e-7)

    def test_zero_grad_zero_decay_is_noop(self):
        m = tiny()
        before = {n: p.data.copy() for n, p in m.named_parameters()}
        for p in m.parameters():
            p.grad = np.zeros_like(p.data)
        optimizer_step(ModelParams.from_module(m), OptimState(weight_decay=0.0), 1e-3)
        for n, p in m.named_parameters():
            assert np.array_equal(p.data, before[n])

    def test_decoupled_decay_shrinks_weights(self):
        m = tiny()
        w0 = m.fc.weight.data.copy()
        for p in m.parameters():
            p.grad = np.zeros_like(p.data)
        optimizer_step(ModelParams.from_module(m), OptimState(weight_decay=0.5), 0.1)
        assert np.allclose(m.fc.weight.data, w0 * (1 - 0.1 * 0.5))

    def test_frozen_untouched_and_grads_cleared(self):
        m = tiny()
        m.fc.weight.requires_grad = False
        w0 = m.fc.weight.data.copy()
        for p in m.parameters():
            p.grad = np.ones_like(p.data)
        params = ModelParams.from_module(m)
        state = OptimState()
        optimizer_step(params, state, 1e-2)
        assert np.array_equal(m.fc.weight.data, w0)
        assert "fc.weight" not in state.m
        assert all(p.grad is None for p in m.parameters())

    def test_missing_gradient(self):
        with pytest.raises(ContractError):
            optimizer_step(ModelParams.from_module(tiny()), OptimState(), 1e-3)

    def test_grad_norm(self):
        m = tiny()
        for p in m.parameters():
            p.grad = np.ones_like(p.data)
        assert global_grad_norm(ModelParams.from_module(m)) == pytest.approx(np.sqrt(6 + 2 + 2 + 2))


class TestSchedule:
    def test_endpoints(self):
        assert cosine_warmup_lr(0, 1e-4, 10, 100) == 0.0
        assert cosine_warmup_lr(10, 1e-4, 10, 100) == pytest.approx(1e-4)
        assert cosine_warmup_lr(100, 1e-4, 10, 100) == pytest.approx(0.0, abs=1e-20)

    def test_ramp_and_midpoint(self):
        assert cosine_warmup_lr(5, 1e-4, 10, 100) == pytest.approx(5e-5)
        assert cosine_warmup_lr(55, 1e-4, 10, 100) == pytest.approx(5e-5)

    def test_monotone_after_warmup(self):
        lrs = [cosine_warmup_lr(s, 1.0, 20, 200) for s in range(20, 201)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("step,warm,total", [(-1, 5, 10), (11, 5, 10), (0, 10, 10)])
    def test_out_of_range(self, step, warm, total):
        with pytest.raises(ValueError):
            cosine_warmup_lr(step, 1e-4, warm, total)


class TestNTW:
    def test_roundtrip_is_float32_and_ordered(self, rng):
        tensors = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.c": np.arange(4, dtype=np.float64)}
        back = decode_ntw(encode_ntw(tensors))
        assert list(back) == ["a", "b.c"]
        for k in tensors:
            assert back[k].dtype == np.float32 and np.array_equal(back[k], tensors[k].astype(np.float32))

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            decode_ntw(b"XXXX" + b"\0" * 8)
        assert err.value.offset == 0

    def test_truncation_reports_offset(self, rng):
        buf = encode_ntw({"w": rng.standard_normal(5).astype(np.float32)})
        with pytest.raises(FormatError) as err:
            decode_ntw(buf[:-3])
        assert 0 < err.value.offset <= len(buf) - 3

    def test_trailing_bytes(self):
        buf = encode_ntw({"w": np.zeros(2, np.float32)})
        with pytest.raises(FormatError) as err:
            decode_ntw(buf + b"\0")
        assert err.value.offset == len(buf)

    def test_save_model_includes_bn_buffers(self, tmp_path):
        m = tiny()
        m.bn.running_mean[...] = [0.25, -1.0]
        save_model(tmp_path / "m.ntw", m)
        loaded = load_ntw(tmp_path / "m.ntw")
        assert np.array_equal(loaded["bn.running_mean"], [0.25, -1.0])
        assert set(loaded) == set(m.state_dict())


class TestImport:
    def test_overlay_and_unmatched_names(self):
        src, dst = tiny(1), tiny(2)
        tensors = dict(src.state_dict(), extra=np.zeros(1, np.float32))
        unmatched = import_weights(dst, tensors)
        assert unmatched == ["extra"]
        for n, a in src.state_dict().items():
            assert np.array_equal(dst.state_dict()[n], a)

    def test_shape_mismatch_aborts_before_writing(self):
        dst = tiny(2)
        before = dst.state_dict()
        with pytest.raises(WeightImportError):
            import_weights(dst, {"fc.bias": np.ones(2, np.float32), "fc.weight": np.ones((3, 3), np.float32)})
        for n, a in dst.state_dict().items():
            assert np.array_equal(a, before[n])


def test_ntw_header_layout():
    buf = encode_ntw({"w": np.zeros((2,), np.float32)})
    assert buf[:4] == b"NTW1"
    (count,) = struct.unpack_from("<I", buf, 4)
    assert count == 1
