"""Confidence-based dynamic filtering of teacher pseudo-labels.

A global threshold tracks the (class-averaged) teacher confidence and a local
per-class threshold tracks each class's own confidence, both as exponential
moving averages. The per-class acceptance threshold is the global one scaled by
``(local / max(local)) ** gamma``, so under-confident minority classes get a
lower bar instead of being filtered away.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .types import IGNORE, DegenerateStateError


@dataclass(frozen=True)
class CdfConfig:
    num_classes: int = 3
    ema_lambda: float = 0.999
    gamma: float = 0.25
    t_init_global: float = 0.85


@dataclass(frozen=True)
class ThresholdState:
    t_global: float
    t_local: np.ndarray = field(repr=False)
    step: int = 0

    @classmethod
    def initial(cls, config: CdfConfig) -> "ThresholdState":
        k = config.num_classes
        return cls(float(config.t_init_global), np.full(k, 1.0 / k), 0)


@dataclass(frozen=True)
class ClassConfidence:
    alpha_local: np.ndarray   # [K], nan where absent
    present: np.ndarray       # [K] bool
    alpha_global: float | None


@torch.no_grad()
def class_confidence(probs: torch.Tensor) -> ClassConfidence:
    """Mean max-probability of the pixels predicted as each class.

    ``probs`` is ``[B, K, H, W]``. The global confidence is the mean over the
    classes that appear in the batch.
    """
    k = probs.shape[1]
    conf, arg = probs.max(dim=1)
    conf = conf.double().flatten()
    arg = arg.flatten()
    sums = torch.zeros(k, dtype=torch.float64).index_add_(0, arg, conf)
    counts = torch.bincount(arg, minlength=k).double()
    present = (counts > 0).numpy()
    alpha = np.full(k, np.nan)
    alpha[present] = (sums[counts > 0] / counts[counts > 0]).numpy()
    alpha_global = float(alpha[present].mean()) if present.any() else None
    return ClassConfidence(alpha, present, alpha_global)


def update_thresholds(state: ThresholdState, confidence: ClassConfidence,
                      config: CdfConfig) -> ThresholdState:
    lam = config.ema_lambda
    t_global = state.t_global
    if confidence.alpha_global is not None:
        t_global = lam * t_global + (1 - lam) * confidence.alpha_global
    t_local = state.t_local.copy()
    p = confidence.present
    t_local[p] = lam * t_local[p] + (1 - lam) * confidence.alpha_local[p]
    return ThresholdState(float(t_global), t_local, state.step + 1)


def effective_threshold(state: ThresholdState, config: CdfConfig) -> np.ndarray:
    top = float(np.max(state.t_local))
    if not top > 0:
        raise DegenerateStateError("all local thresholds are zero")
    return state.t_global * (state.t_local / top) ** config.gamma


def fixed_threshold(num_classes: int, value: float = 0.95) -> np.ndarray:
    return np.full(num_classes, float(value))


@torch.no_grad()
def filter_pseudo_labels(probs: torch.Tensor, thresholds) -> torch.Tensor:
    """Hard argmax labels, ``IGNORE`` where the max probability is below its class threshold.

    Ties in the argmax go to the lowest class index.
    """
    thr = torch.as_tensor(np.asarray(thresholds, dtype=np.float64), dtype=probs.dtype,
                          device=probs.device)
    conf, arg = probs.max(dim=1)
    keep = conf >= thr[arg]
    return torch.where(keep, arg, torch.full_like(arg, IGNORE))


@dataclass
class UtilizationCounter:
    """Accumulates kept / predicted pixel counts per class over many batches."""

    num_classes: int
    kept: np.ndarray = None
    total: np.ndarray = None

    def __post_init__(self):
        if self.kept is None:
            self.kept = np.zeros(self.num_classes, dtype=np.int64)
        if self.total is None:
            self.total = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, pseudo: torch.Tensor, reference_argmax: torch.Tensor) -> None:
        kept, total = utilization_counts(pseudo, reference_argmax, self.num_classes)
        self.kept += kept
        self.total += total

    def rates(self) -> np.ndarray:
        out = np.full(self.num_classes, np.nan)
        nz = self.total > 0
        out[nz] = self.kept[nz] / self.total[nz]
        return out


def utilization_counts(pseudo: torch.Tensor, reference_argmax: torch.Tensor,
                       num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    ref = reference_argmax.flatten()
    kept = (pseudo.flatten() != IGNORE)
    total = torch.bincount(ref, minlength=num_classes)[:num_classes]
    survived = torch.bincount(ref[kept], minlength=num_classes)[:num_classes]
    return survived.numpy().astype(np.int64), total.numpy().astype(np.int64)


def utilization(pseudo: torch.Tensor, reference_argmax: torch.Tensor,
                num_classes: int) -> np.ndarray:
    """Per-class fraction of argmax pixels whose pseudo-label survived; nan if absent."""
    if pseudo.shape != reference_argmax.shape:
        raise ValueError(f"shape mismatch {tuple(pseudo.shape)} vs {tuple(reference_argmax.shape)}")
    counter = UtilizationCounter(num_classes)
    counter.add(pseudo, reference_argmax)
    return counter.rates()


def threshold_columns(num_classes: int) -> list[str]:
    k = range(num_classes)
    return (["epoch", "t_global"] + [f"t_local_{c}" for c in k] + [f"T_{c}" for c in k]
            + [f"util_{c}" for c in k] + [f"util_fixed_{c}" for c in k])


def write_threshold_rows(path: str | Path, rows: list[dict], num_classes: int) -> None:
    cols = threshold_columns(num_classes)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(c)) for c in cols})


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if np.isnan(value) else repr(value)


__all__ = [
    "CdfConfig", "ThresholdState", "ClassConfidence", "class_confidence", "update_thresholds",
    "effective_threshold", "fixed_threshold", "filter_pseudo_labels", "utilization",
    "utilization_counts", "UtilizationCounter", "threshold_columns", "write_threshold_rows",
]
