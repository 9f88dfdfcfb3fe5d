"""Synthetic low-contrast data, folder ingestion and labeled/unlabeled partitions.

The generator draws smooth ellipses for two tumor classes (1 = benign, the
minority class; 2 = malignant) over a textured background. ``contrast_delta``
sets the intensity gap between adjacent classes and ``edge_blur`` softens the
image (never the mask) around region borders.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .types import IGNORE, GenerationError, IngestionError

TINT = np.array([1.0, 0.78, 0.72], dtype=np.float64)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    num_classes: int = 3
    contrast_delta: float = 0.1
    minority_fraction: float = 0.05
    max_blobs: int = 3
    malignant_area_min: float = 0.03
    malignant_area_max: float = 0.12
    edge_blur: float = 1.5
    texture: float = 0.05
    noise_sigma: float = 0.03
    seed: int = 0


def class_levels(delta: float) -> np.ndarray:
    """Mean gray level of normal, benign and malignant tissue."""
    return np.array([0.5 - delta, 0.5, 0.5 + delta])


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place(shape, area, rng, forbidden=None, tries=200):
    h, w = shape
    for _ in range(tries):
        aspect = rng.uniform(0.6, 1.0)
        b = np.sqrt(area * aspect / np.pi)
        a = b / aspect
        theta = rng.uniform(0, np.pi)
        r = max(a, b)
        if 2 * r + 2 > min(h, w):
            continue
        cy = rng.uniform(r + 1, h - r - 1)
        cx = rng.uniform(r + 1, w - r - 1)
        blob = _ellipse(shape, cy, cx, a, b, theta)
        if not blob.any():
            continue
        if forbidden is not None and (blob & forbidden).any():
            continue
        return blob
    return None


def generate_one(config: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([config.seed, index])
    n = config.image_size
    shape = (n, n)
    mask = np.zeros(shape, dtype=np.int64)
    for _ in range(int(rng.integers(0, config.max_blobs + 1))):
        area = rng.uniform(config.malignant_area_min, config.malignant_area_max) * n * n
        blob = _place(shape, area, rng)
        if blob is not None:
            mask[blob] = 2
    benign = np.zeros(shape, dtype=bool)
    mean_blobs = config.max_blobs / 2
    for _ in range(int(rng.integers(0, config.max_blobs + 1))):
        area = config.minority_fraction * n * n / mean_blobs * rng.uniform(0.75, 1.25)
        blob = _place(shape, area, rng, forbidden=benign)
        if blob is None:
            raise GenerationError(
                f"cannot fit benign blobs for minority_fraction={config.minority_fraction} "
                f"in a {n}x{n} image (index {index})")
        benign |= blob
    mask[benign] = 1

    levels = class_levels(config.contrast_delta)
    soft = np.stack([(mask == c).astype(np.float64) for c in range(3)])
    if config.edge_blur > 0:
        soft = np.stack([ndimage.gaussian_filter(s, config.edge_blur, mode="nearest") for s in soft])
    gray = np.tensordot(levels, soft, axes=1)
    if config.texture > 0:
        tex = ndimage.gaussian_filter(rng.standard_normal(shape), n / 8, mode="wrap")
        tex /= max(np.abs(tex).max(), 1e-12)
        gray = gray + config.texture * tex
    image = gray[..., None] * TINT
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate(config: SynthConfig, count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic synthetic dataset; each image's seed is derived from (seed, index)."""
    if count < 1:
        raise GenerationError("count must be at least 1")
    if config.num_classes != 3:
        raise GenerationError("the synthetic generator produces exactly 3 classes")
    return [generate_one(config, i) for i in range(count)]


def save_dataset(pairs, out_dir: str | Path, names: list[str] | None = None,
                 splits: list[str] | None = None, extra: dict | None = None) -> Path:
    """Write ``images/*.png`` (8-bit RGB), ``masks/*.png`` (grayscale index) and a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:05d}" for i in range(len(pairs))]
    splits = splits or ["train"] * len(pairs)
    for name, (image, mask) in zip(names, pairs):
        rgb = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
        if rgb.shape[2] == 1:
            rgb = rgb[..., 0]
        PILImage.fromarray(rgb).save(out / "images" / f"{name}.png")
        PILImage.fromarray(mask.astype(np.uint8), mode="L").save(out / "masks" / f"{name}.png")
    manifest = {"files": [{"name": f"{n}.png", "split": s} for n, s in zip(names, splits)]}
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def _map_mask(arr: np.ndarray, palette: dict | None, name: str) -> np.ndarray:
    if palette is None:
        if arr.ndim == 3:
            raise IngestionError(f"{name}: RGB mask needs a palette")
        return arr.astype(np.int64)
    out = np.full(arr.shape[:2], -1, dtype=np.int64)
    if arr.ndim == 3:
        keys = {tuple(int(v) for v in (k if isinstance(k, (tuple, list)) else (k,) * 3)): c
                for k, c in palette.items()}
        flat = arr.reshape(-1, arr.shape[2])[:, :3]
        colors, inverse = np.unique(flat, axis=0, return_inverse=True)
        lut = np.array([keys.get(tuple(int(v) for v in col), -1) for col in colors])
        out = lut[inverse.reshape(-1)].reshape(arr.shape[:2])
        unknown = [tuple(int(v) for v in col) for col, c in zip(colors, lut) if c < 0]
    else:
        keys = {int(k if not isinstance(k, (tuple, list)) else k[0]): c for k, c in palette.items()}
        values = np.unique(arr)
        for v in values:
            if int(v) in keys:
                out[arr == v] = keys[int(v)]
        unknown = [int(v) for v in values if int(v) not in keys]
    if unknown:
        raise IngestionError(f"{name}: mask colors not in palette: {unknown}")
    return out


def load_folder(images_dir: str | Path, masks_dir: str | Path,
                palette: dict | None = None, names: list[str] | None = None):
    """Load ``(image, mask)`` pairs matched by file stem, sorted by filename.

    ``palette`` maps mask pixel values (int for grayscale/palette PNGs, RGB tuples
    for color masks) to class indices; without one, grayscale values are class
    indices directly.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    imgs = {p.stem: p for p in images_dir.iterdir() if p.is_file()} if images_dir.exists() else {}
    msks = {p.stem: p for p in masks_dir.iterdir() if p.is_file()} if masks_dir.exists() else {}
    orphans = sorted(set(imgs) ^ set(msks))
    if orphans:
        warnings.warn(f"files without a partner: {orphans}", stacklevel=2)
    stems = sorted(set(imgs) & set(msks))
    if names is not None:
        wanted = {Path(n).stem for n in names}
        stems = [s for s in stems if s in wanted]
    pairs = []
    for stem in stems:
        with PILImage.open(imgs[stem]) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with PILImage.open(msks[stem]) as mk:
            raw = np.asarray(mk.convert("RGB") if mk.mode in ("RGB", "RGBA") else mk)
        pairs.append((image, _map_mask(raw, palette, msks[stem].name)))
    return pairs


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return {}
    with open(path) as fh:
        return json.load(fh)


def load_split(root: str | Path, split: str, palette: dict | None = None):
    """Load the files a dataset manifest assigns to ``split`` (all files if no manifest)."""
    root = Path(root)
    manifest = load_manifest(root)
    names = None
    if manifest.get("files"):
        names = [f["name"] for f in manifest["files"] if f.get("split") == split]
    return load_folder(root / "images", root / "masks", palette, names)


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float = 0.1
    split_seed: int = 0
    ordering: str = "random"


def labeled_count(fraction: float, n: int) -> int:
    """Round half up, at least one labeled item."""
    return min(n, max(1, int(np.floor(fraction * n + 0.5))))


def split(dataset, spec: SplitSpec):
    """Partition into ``(labeled, unlabeled)``; chronological keeps index order."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 items to split")
    if spec.ordering == "chronological":
        order = np.arange(n)
    elif spec.ordering == "random":
        order = np.random.default_rng(spec.split_seed).permutation(n)
    else:
        raise ValueError(f"unknown ordering {spec.ordering!r}")
    m = labeled_count(spec.labeled_fraction, n)
    lab = sorted(order[:m].tolist())
    unl = sorted(order[m:].tolist())
    return [dataset[i] for i in lab], [dataset[i] for i in unl]


def split_indices(n: int, spec: SplitSpec) -> tuple[list[int], list[int]]:
    idx = list(range(n))
    lab, unl = split(idx, spec)
    return lab, unl


def synth_manifest_extra(config: SynthConfig) -> dict:
    return {"generator": asdict(config), "ignore_index": IGNORE}
