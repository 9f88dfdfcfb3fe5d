"""Shared domain types, error classes and shape contracts.

Array conventions used across the package:

* a single ``Image`` is a float32 numpy array ``[H, W, D]`` with values in [0, 1];
* a single ``Mask`` is an int64 numpy array ``[H, W]``;
* once batched for the network everything is channel-first torch:
  images ``[B, D, H, W]``, probabilities/logits ``[B, K, H, W]``,
  labels ``[B, H, W]``.

Classes are 0-indexed (class 0 is background / normal tissue). Pixels that carry
no label use the ``IGNORE`` sentinel, which lies outside ``0..K-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255
MIN_SIDE = 8


class LocoError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LocoError, ValueError):
    pass


class DomainError(LocoError, ValueError):
    pass


class NumericFault(LocoError, ArithmeticError):
    pass


class DegenerateStateError(LocoError, ValueError):
    pass


class StructuralError(LocoError, TypeError):
    pass


class GenerationError(LocoError, ValueError):
    pass


class IngestionError(LocoError, ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    """A labeled batch ``(image, mask)`` pairs plus a batch of unlabeled images."""

    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    num_classes: int = 3


def check_image(image: np.ndarray, name: str = "image") -> None:
    if image.ndim != 3:
        raise ShapeError(f"{name}: expected [H, W, D], got shape {image.shape}")
    h, w, _ = image.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ShapeError(f"{name}: spatial size {h}x{w} below minimum {MIN_SIDE}x{MIN_SIDE}")
    if not np.all(np.isfinite(image)):
        raise DomainError(f"{name}: non-finite pixel values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DomainError(f"{name}: pixel values outside [0, 1]")


def check_mask(mask: np.ndarray, num_classes: int, shape: tuple | None = None,
               name: str = "mask") -> None:
    if mask.ndim != 2:
        raise ShapeError(f"{name}: expected [H, W], got shape {mask.shape}")
    if shape is not None and tuple(mask.shape) != tuple(shape):
        raise ShapeError(f"{name}: shape {tuple(mask.shape)} does not match image {tuple(shape)}")
    bad = (mask != IGNORE) & ((mask < 0) | (mask >= num_classes))
    if bad.any():
        values = sorted(set(np.unique(mask[bad]).tolist()))
        raise DomainError(f"{name}: label values {values} outside 0..{num_classes - 1}")


def validate(batch: Batch) -> Batch:
    """Return ``batch`` unchanged if every shape and range invariant holds."""
    ref = None
    for i, (image, mask) in enumerate(batch.labeled):
        check_image(image, f"labeled[{i}].image")
        check_mask(mask, batch.num_classes, image.shape[:2], f"labeled[{i}].mask")
        if ref is None:
            ref = image.shape
        elif image.shape != ref:
            raise ShapeError(f"labeled[{i}].image: shape {image.shape} differs from {ref}")
    for i, image in enumerate(batch.unlabeled):
        check_image(image, f"unlabeled[{i}]")
        if ref is None:
            ref = image.shape
        elif image.shape != ref:
            raise ShapeError(f"unlabeled[{i}]: shape {image.shape} differs from {ref}")
    return batch


def check_probs(probs, atol: float = 1e-5) -> None:
    """Assert the ProbMap contract on a ``[B, K, H, W]`` tensor."""
    s = probs.sum(dim=1)
    if (probs < 0).any() or (s - 1).abs().max() > atol:
        raise DomainError("probability map is not normalized over the class axis")
