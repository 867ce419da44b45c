"""Confusion matrices, segmentation metrics, band ablation, and error maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .nn.functional import IGNORE_LABEL, LabelError


class UndefinedMetricsError(ValueError):
    """Metrics requested from a confusion matrix with no counted pixels."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C] int64, rows = ground truth, cols = prediction
    ignored: int = 0

    @classmethod
    def empty(cls, classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def confusion(pred: np.ndarray, gt: np.ndarray, classes: int, ignore: int = IGNORE_LABEL) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = gt != ignore
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= classes):
        raise LabelError(f"ground-truth label outside [0, {classes})")
    if p.size and (p.min() < 0 or p.max() >= classes):
        raise LabelError(f"predicted label outside [0, {classes})")
    counts = np.bincount(g * classes + p, minlength=classes * classes).reshape(classes, classes)
    return ConfusionMatrix(counts.astype(np.int64), int((~keep).sum()))


@dataclass(frozen=True)
class Metrics:
    miou: float
    aacc: float
    macc: float
    iou: np.ndarray  # per class, NaN where the class is absent from prediction and ground truth
    acc: np.ndarray  # per-class recall, NaN where the class is absent from ground truth


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Per-class IoU and recall; classes with an empty union are left out of the means."""
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise UndefinedMetricsError("confusion matrix is empty")
    tp = np.diag(c)
    gt_count = c.sum(axis=1)
    pred_count = c.sum(axis=0)
    union = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(gt_count > 0, tp / gt_count, np.nan)
    return Metrics(float(np.nanmean(iou)), float(tp.sum() / total), float(np.nanmean(acc)), iou, acc)


def write_metrics_csv(path: str | Path, m: Metrics, class_names: Iterable[str] | None = None) -> None:
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(m.iou))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou", "acc"])
        for name, iou, acc in zip(names, m.iou, m.acc):
            w.writerow([name, repr(float(iou)), repr(float(acc))])
        w.writerow(["__overall__", "miou", "aacc", "macc"])
        w.writerow(["__overall__", repr(m.miou), repr(m.aacc), repr(m.macc)])


def read_metrics_csv(path: str | Path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    per_class = {r[0]: (float(r[1]), float(r[2])) for r in rows[1:] if r[0] != "__overall__"}
    overall = rows[-1]
    return {"classes": per_class, "miou": float(overall[1]), "aacc": float(overall[2]), "macc": float(overall[3])}


def evaluate(predict: Callable[[np.ndarray], np.ndarray], dataset, classes: int,
             transform: Callable[[np.ndarray], np.ndarray] | None = None) -> ConfusionMatrix:
    """Accumulate a confusion matrix of ``predict(cube) -> labels`` over ``(cube, labels)`` pairs."""
    cm = ConfusionMatrix.empty(classes)
    for cube, labels in dataset:
        data = cube if isinstance(cube, np.ndarray) else cube.data
        if transform is not None:
            data = transform(data)
        cm = cm + confusion(predict(data), labels, classes)
    return cm


def zero_band(band: int) -> Callable[[np.ndarray], np.ndarray]:
    def apply(data: np.ndarray) -> np.ndarray:
        out = np.array(data, copy=True)
        out[band] = 0.0
        return out

    return apply


def band_ablation(predict, dataset, classes: int, bands: Iterable[int],
                  baseline: Metrics | None = None) -> tuple[Metrics, dict[int, np.ndarray]]:
    """Per-class IoU drop when each band is zeroed in every cube.

    Returns the unablated metrics and ``{band: ΔIoU [C]}``; classes absent
    from both runs get ΔIoU 0.
    """
    if baseline is None:
        baseline = metrics(evaluate(predict, dataset, classes))
    drops = {}
    for b in bands:
        ablated = metrics(evaluate(predict, dataset, classes, zero_band(b)))
        drops[b] = np.nan_to_num(baseline.iou - ablated.iou, nan=0.0)
    return baseline, drops


def write_ablation_csv(path: str | Path, drops: dict[int, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band", "class", "delta_iou"])
        for band in sorted(drops):
            for c, d in enumerate(drops[band]):
                w.writerow([band, c, repr(float(d))])


def read_ablation_csv(path: str | Path) -> dict[int, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[int, dict[int, float]] = {}
    for r in rows:
        out.setdefault(int(r["band"]), {})[int(r["class"])] = float(r["delta_iou"])
    return {b: np.array([v[c] for c in sorted(v)]) for b, v in out.items()}


RED = (255, 0, 0)
GREEN = (0, 255, 0)
NEUTRAL = (128, 128, 128)
BLACK = (0, 0, 0)


def improvement_error_map(pred_ours: np.ndarray, pred_base: np.ndarray, gt: np.ndarray,
                          ignore: int = IGNORE_LABEL) -> np.ndarray:
    """RGB map: red where ours is wrong, green where only the baseline is wrong."""
    if not (pred_ours.shape == pred_base.shape == gt.shape):
        raise ValueError("prediction and ground-truth shapes differ")
    img = np.empty((*gt.shape, 3), dtype=np.uint8)
    img[...] = NEUTRAL
    ours_wrong = pred_ours != gt
    img[(pred_base != gt) & ~ours_wrong] = GREEN
    img[ours_wrong] = RED
    img[gt == ignore] = BLACK
    return img


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w, 3)
