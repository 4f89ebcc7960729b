"""Confusion-matrix IoU / mIoU evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import DEFAULT_IGNORE_ID, ClassVocabulary, DataError, EnhsegError, LabelMap, ValidationError


class UndefinedMetricError(EnhsegError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; ignored pixels never counted."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_accumulate(pred, gt, cm: ConfusionMatrix, ignore_id: int = DEFAULT_IGNORE_ID) -> ConfusionMatrix:
    """Add one (prediction, ground truth) pair to ``cm`` in place and return it."""
    p = pred.ids if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.ids if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValidationError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    C = cm.num_classes
    keep = g != ignore_id
    if ((g[keep] < 0) | (g[keep] >= C)).any():
        raise ValidationError("ground truth id out of range")
    pk = p[keep]
    if ((pk < 0) | (pk >= C)).any():
        raise ValidationError("prediction contains ids outside [0, C) on evaluated pixels")
    cm.counts += np.bincount(g[keep].astype(np.int64) * C + pk.astype(np.int64),
                             minlength=C * C).reshape(C, C)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """``tp / (tp + fp + fn)`` per class; NaN where the class never occurs in either map."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(0) + c.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    iou = iou_per_class(cm)
    defined = ~np.isnan(iou)
    if not defined.any():
        raise UndefinedMetricError("no class has a defined IoU")
    return float(iou[defined].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    t = cm.total
    return float(np.trace(cm.counts) / t) if t else float("nan")


def evaluate(predict, samples: Iterable, vocab: ClassVocabulary, dump_dir: str | Path | None = None) -> dict:
    """Whole-image evaluation.

    ``predict`` maps an ``(H, W, 3)`` image to an ``(H, W)`` id map;
    ``samples`` yields ``(id, image, LabelMap)``.
    """
    cm = ConfusionMatrix(vocab.num_classes)
    n = 0
    for sample_id, img, gt in samples:
        pred = predict(img)
        confusion_accumulate(pred, gt, cm, vocab.ignore_id)
        if dump_dir is not None:
            from .dataio import write_label_png
            write_label_png(Path(dump_dir) / f"{sample_id}.png", pred)
        n += 1
    if n == 0:
        raise DataError("evaluation dataset is empty")
    iou = iou_per_class(cm)
    return {
        "miou": miou(cm),
        "per_class_iou": {name: (None if np.isnan(v) else float(v)) for name, v in zip(vocab.names, iou)},
        "pixel_accuracy": pixel_accuracy(cm),
        "n_images": n,
        "confusion": cm.counts.tolist(),
    }


def format_report(result: dict) -> str:
    lines = [f"{'class':<20} {'IoU':>8}"]
    for name, v in result["per_class_iou"].items():
        lines.append(f"{name:<20} {'n/a' if v is None else f'{100 * v:8.2f}':>8}")
    lines.append(f"{'mIoU':<20} {100 * result['miou']:8.2f}")
    lines.append(f"{'pixel accuracy':<20} {100 * result['pixel_accuracy']:8.2f}")
    return "\n".join(lines)


def write_report(path: str | Path, result: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=2))
