import numpy as np
import pytest

from hsi_adapter.nn.functional import IGNORE_LABEL
from hsi_adapter.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float32):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def grad_of(fn, *arrays, dtype=np.float64):
    """Analytic gradients of ``sum(fn(*leaves) * probe)`` for a fixed random probe."""
    ts = [leaf(a, dtype) for a in arrays]
    out = fn(*ts)
    probe = np.random.default_rng(99).standard_normal(out.shape).astype(dtype)
    (out * Tensor(probe)).sum().backward()
    return out, [t.grad for t in ts], probe


TINY = """\
model.dim = 16
model.depth = 4
model.vit_heads = 2
model.stages = ((0, 0), (1, 1), (2, 2), (3, 3))
model.pretrain_size = 28
model.d_s = 8
model.spectral_heads = 2
model.spectral_layers = 1
model.stem_channels = 8
model.stage_channels = (8, 16, 16)
model.deform_heads = 2
model.deform_points = 2
model.decoder_channels = 8
model.aux_channels = 8
data.bands = 6
data.classes = 3
data.height = 32
data.width = 32
data.crop_h = 32
data.crop_w = 32
data.train_scenes = 4
data.val_scenes = 2
data.ablation_band = 3
data.dark_bands = (0, 5)
optim.warmup_steps = 1
optim.total_steps = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a config small enough to train in a few seconds."""
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return path


def brute_force(pred, gt, classes):
    """Per-pixel loops; returns (miou, aacc, macc)."""
    ious, accs = [], []
    hit = seen = 0
    for c in range(classes):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == IGNORE_LABEL:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
        if tp + fn:
            accs.append(tp / (tp + fn))
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != IGNORE_LABEL:
            seen += 1
            hit += p == g
    return np.mean(ious), hit / seen, np.mean(accs)
