"""Weak (geometric) and strong (intensity + CutMix) perturbations.

The weak view records its geometry so the teacher's pseudo-labels and the
student's strong view stay pixel-aligned. The strong view never moves pixels;
the only label-changing operation is CutMix, which is applied to the image and
to the pseudo-label map with the same rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

from .types import IGNORE, ShapeError


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 64
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    cutmix_prob: float = 0.5
    cutmix_area_min: float = 0.25
    cutmix_area_max: float = 0.5


@dataclass(frozen=True)
class Geometry:
    scale: float
    scaled_size: tuple[int, int]
    top: int
    left: int
    crop: int
    flip: bool


@dataclass(frozen=True)
class WeakView:
    image: np.ndarray
    mask: np.ndarray | None
    geometry: Geometry


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


@dataclass(frozen=True)
class StrongView:
    image: np.ndarray
    cutmix_box: Box | None = None
    partner_index: int | None = None


def _resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(image.shape[:2]) == tuple(size):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0).copy()


def _resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(mask.shape) == tuple(size):
        return mask.copy()
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    out = F.interpolate(t, size=size, mode="nearest")
    return out[0, 0].numpy().astype(mask.dtype)


def sample_geometry(shape: tuple[int, int], config: AugmentConfig,
                    rng: np.random.Generator) -> Geometry:
    h, w = shape
    scale = float(rng.uniform(config.scale_min, config.scale_max))
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ph, pw = max(sh, config.crop_size), max(sw, config.crop_size)
    top = int(rng.integers(0, ph - config.crop_size + 1))
    left = int(rng.integers(0, pw - config.crop_size + 1))
    flip = bool(rng.random() < config.flip_prob)
    return Geometry(scale, (sh, sw), top, left, config.crop_size, flip)


def replay(geometry: Geometry, image: np.ndarray,
           mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply a recorded geometry to an image (and optionally its mask)."""
    g = geometry
    img = _resize(image, g.scaled_size)
    msk = None if mask is None else _resize_mask(mask, g.scaled_size)
    sh, sw = g.scaled_size
    ph, pw = max(sh, g.crop), max(sw, g.crop)
    if (ph, pw) != (sh, sw):
        # bottom/right zero padding; padded label pixels are unlabeled
        img = np.pad(img, ((0, ph - sh), (0, pw - sw), (0, 0)))
        if msk is not None:
            msk = np.pad(msk, ((0, ph - sh), (0, pw - sw)), constant_values=IGNORE)
    img = img[g.top:g.top + g.crop, g.left:g.left + g.crop]
    if msk is not None:
        msk = msk[g.top:g.top + g.crop, g.left:g.left + g.crop]
    if g.flip:
        img = img[:, ::-1]
        if msk is not None:
            msk = msk[:, ::-1]
    img = np.ascontiguousarray(img, dtype=np.float32)
    if msk is not None:
        msk = np.ascontiguousarray(msk)
    return img, msk


def weak_perturb(image: np.ndarray, mask: np.ndarray | None, rng_seed: int,
                 config: AugmentConfig = AugmentConfig()) -> WeakView:
    """Random scale, random crop (zero padded when needed) and horizontal flip."""
    if mask is not None and mask.shape != image.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    rng = np.random.default_rng(rng_seed)
    geometry = sample_geometry(image.shape[:2], config, rng)
    img, msk = replay(geometry, image, mask)
    return WeakView(np.clip(img, 0.0, 1.0), msk, geometry)


def sample_box(shape: tuple[int, int], config: AugmentConfig,
               rng: np.random.Generator) -> Box:
    h, w = shape
    area = rng.uniform(config.cutmix_area_min, config.cutmix_area_max) * h * w
    ratio = rng.uniform(0.5, 2.0)
    bh = int(np.clip(round(np.sqrt(area * ratio)), 1, h))
    bw = int(np.clip(round(area / max(bh, 1)), 1, w))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return Box(top, left, bh, bw)


def _intensity(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    # draw every random number up front so the stream does not depend on which ops fire
    u = rng.random(4)
    b = rng.uniform(max(0.0, 1 - config.brightness), 1 + config.brightness)
    c = rng.uniform(max(0.0, 1 - config.contrast), 1 + config.contrast)
    s = rng.uniform(max(0.0, 1 - config.saturation), 1 + config.saturation)
    hshift = rng.uniform(-config.hue, config.hue)
    sigma = rng.uniform(config.blur_sigma_min, config.blur_sigma_max)

    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    rgb = t.shape[0] == 3
    if u[0] < config.jitter_prob:
        if config.brightness > 0:
            t = TF.adjust_brightness(t, b)
        if config.contrast > 0:
            t = TF.adjust_contrast(t, c)
        if rgb and config.saturation > 0:
            t = TF.adjust_saturation(t, s)
        if rgb and config.hue > 0:
            t = TF.adjust_hue(t, hshift)
    if rgb and u[1] < config.grayscale_prob:
        t = TF.rgb_to_grayscale(t, num_output_channels=3)
    if u[2] < config.blur_prob and config.blur_sigma_max > 0:
        ksize = 2 * int(np.ceil(3 * sigma)) + 1
        t = TF.gaussian_blur(t, [ksize, ksize], [sigma, sigma])
    return t.clamp(0.0, 1.0).numpy().transpose(1, 2, 0).copy()


def strong_perturb(view: WeakView, rng_seed: int, config: AugmentConfig = AugmentConfig(),
                   pseudo: np.ndarray | None = None, partner: WeakView | None = None,
                   partner_pseudo: np.ndarray | None = None, partner_index: int | None = None,
                   box: Box | None = None) -> tuple[StrongView, np.ndarray | None]:
    """CutMix with ``partner`` (when it fires) followed by intensity jitter.

    ``pseudo`` is the view's own pseudo-label map; when CutMix fires the returned
    map takes ``partner_pseudo`` inside the box and ``pseudo`` elsewhere. Passing
    ``box`` forces CutMix with that rectangle.
    """
    rng = np.random.default_rng(rng_seed)
    image = view.image.copy()
    mixed = None if pseudo is None else pseudo.copy()
    fire = rng.random() < config.cutmix_prob
    sampled = sample_box(image.shape[:2], config, rng)
    used = None
    if partner is not None:
        if partner.image.shape != image.shape:
            raise ShapeError(f"CutMix partner shape {partner.image.shape} != {image.shape}")
        if box is not None or fire:
            used = box if box is not None else sampled
            rows, cols = used.slices()
            image[rows, cols] = partner.image[rows, cols]
            if mixed is not None:
                if partner_pseudo is None or partner_pseudo.shape != mixed.shape:
                    raise ShapeError("CutMix partner pseudo-labels missing or misshapen")
                mixed[rows, cols] = partner_pseudo[rows, cols]
    image = _intensity(image, config, rng)
    strong = StrongView(image.astype(np.float32), used, partner_index if used else None)
    return strong, mixed
