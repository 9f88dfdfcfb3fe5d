"""IoU, Dice and normalized surface distance, per class and aggregated over a dataset."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .types import IGNORE


def _sets(pred: np.ndarray, truth: np.ndarray, class_id: int):
    valid = truth != IGNORE
    return (pred == class_id) & valid, (truth == class_id) & valid


def iou(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float | None:
    p, t = _sets(np.asarray(pred), np.asarray(truth), class_id)
    union = np.count_nonzero(p | t)
    if union == 0:
        return None
    return np.count_nonzero(p & t) / union


def dsc(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float | None:
    p, t = _sets(np.asarray(pred), np.asarray(truth), class_id)
    denom = np.count_nonzero(p) + np.count_nonzero(t)
    if denom == 0:
        return None
    return 2 * np.count_nonzero(p & t) / denom


def surface(region: np.ndarray) -> np.ndarray:
    """Region pixels 4-adjacent to a non-region pixel or to the image border."""
    padded = np.pad(region, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return region & ~interior


def surface_counts(pred: np.ndarray, truth: np.ndarray, class_id: int,
                   tolerance_px: float) -> tuple[int, int]:
    """(boundary points within tolerance of the other boundary, total boundary points)."""
    p, t = _sets(np.asarray(pred), np.asarray(truth), class_id)
    sp, st = surface(p), surface(t)
    n_p, n_t = int(sp.sum()), int(st.sum())
    if n_p == 0 or n_t == 0:
        return 0, n_p + n_t
    dist_to_t = ndimage.distance_transform_edt(~st)
    dist_to_p = ndimage.distance_transform_edt(~sp)
    close = int((dist_to_t[sp] <= tolerance_px).sum() + (dist_to_p[st] <= tolerance_px).sum())
    return close, n_p + n_t


def nsd(pred: np.ndarray, truth: np.ndarray, class_id: int,
        tolerance_px: float = 2.0) -> float | None:
    close, total = surface_counts(pred, truth, class_id, tolerance_px)
    if total == 0:
        return None
    return close / total


@dataclass
class EvalReport:
    num_classes: int
    iou_per_class: list
    dsc_per_class: list
    nsd_per_class: list
    miou: float
    dsc: float
    nsd: float
    presence: list
    per_image: list = field(default_factory=list)
    include_background: bool = False

    def rows(self) -> list[dict]:
        out = []
        for c in range(self.num_classes):
            out.append({"class": str(c), "iou": self.iou_per_class[c],
                        "dsc": self.dsc_per_class[c], "nsd": self.nsd_per_class[c]})
        out.append({"class": "mean", "iou": self.miou, "dsc": self.dsc, "nsd": self.nsd})
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["class", "iou", "dsc", "nsd"])
            w.writeheader()
            for row in self.rows():
                w.writerow({"class": row["class"], **{k: _cell(row[k]) for k in ("iou", "dsc", "nsd")}})

    def to_text(self) -> str:
        lines = [f"{'class':>6} {'iou':>8} {'dsc':>8} {'nsd':>8}"]
        for row in self.rows():
            cells = [f"{'-':>8}" if row[k] is None else f"{row[k]:8.4f}"
                     for k in ("iou", "dsc", "nsd")]
            lines.append(f"{row['class']:>6} " + " ".join(cells))
        return "\n".join(lines)


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


class MetricAccumulator:
    """Dataset-level (micro) aggregation of confusion and surface counts."""

    def __init__(self, num_classes: int, tolerance_px: float = 2.0,
                 include_background: bool = False, keep_per_image: bool = False):
        self.k = num_classes
        self.tol = tolerance_px
        self.include_background = include_background
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.pred_n = np.zeros(num_classes, dtype=np.int64)
        self.true_n = np.zeros(num_classes, dtype=np.int64)
        self.surf_close = np.zeros(num_classes, dtype=np.int64)
        self.surf_total = np.zeros(num_classes, dtype=np.int64)
        self.keep_per_image = keep_per_image
        self.per_image = []

    def add(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        for c in range(self.k):
            p, t = _sets(pred, truth, c)
            self.inter[c] += np.count_nonzero(p & t)
            self.pred_n[c] += np.count_nonzero(p)
            self.true_n[c] += np.count_nonzero(t)
            close, total = surface_counts(pred, truth, c, self.tol)
            self.surf_close[c] += close
            self.surf_total[c] += total
        if self.keep_per_image:
            self.per_image.append({"iou": [iou(pred, truth, c) for c in range(self.k)],
                                   "dsc": [dsc(pred, truth, c) for c in range(self.k)]})

    def report(self) -> EvalReport:
        ious, dscs, nsds = [], [], []
        for c in range(self.k):
            union = self.pred_n[c] + self.true_n[c] - self.inter[c]
            ious.append(None if union == 0 else self.inter[c] / union)
            denom = self.pred_n[c] + self.true_n[c]
            dscs.append(None if denom == 0 else 2 * self.inter[c] / denom)
            nsds.append(None if self.surf_total[c] == 0 else self.surf_close[c] / self.surf_total[c])
        classes = range(0 if self.include_background else 1, self.k)

        def mean(values):
            vals = [values[c] for c in classes if values[c] is not None]
            return float(np.mean(vals)) if vals else 0.0

        return EvalReport(self.k, [_f(v) for v in ious], [_f(v) for v in dscs],
                          [_f(v) for v in nsds], mean(ious), mean(dscs), mean(nsds),
                          self.true_n.tolist(), self.per_image, self.include_background)


def _f(v):
    return None if v is None else float(v)


@torch.no_grad()
def predict(model: torch.nn.Module, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    logits, _ = model(images)
    return logits.argmax(dim=1)


def evaluate(model: torch.nn.Module, dataset, num_classes: int, tolerance_px: float = 2.0,
             include_background: bool = False, batch_size: int = 16,
             keep_per_image: bool = False) -> EvalReport:
    """Evaluate ``model`` on ``(image, mask)`` pairs with dataset-level aggregation."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    acc = MetricAccumulator(num_classes, tolerance_px, include_background, keep_per_image)
    param = next(iter(model.parameters()), None)
    dtype = param.dtype if param is not None else torch.float32
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        images = torch.from_numpy(np.stack([im.transpose(2, 0, 1) for im, _ in chunk]))
        preds = predict(model, images.to(dtype)).numpy()
        for pred, (_, mask) in zip(preds, chunk):
            acc.add(pred, mask)
    return acc.report()
