"""Low-contrast-enhanced contrastive learning.

Pixels whose embeddings are hard to tell apart are mined in two ways:

* inter-class: the k% pixels of each class least similar to their own class
  embedding (``select_ice``);
* boundary: among pixels that have a differently-labeled pixel in their
  ``h``-nearest grid neighborhood, the k% whose minimum similarity to that
  neighborhood is highest (``select_bce``).

The union of both selections forms the low-contrast set, which is pulled toward
its class embedding and pushed from the other classes by ``lcc_loss``.

All embeddings are L2-normalized, so every dot product is a cosine similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image as PILImage

from .types import IGNORE, ShapeError

DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class LccConfig:
    k_percent: float = 30.0
    neighborhood_h: int = 64
    tau: float = 0.1
    embedding_dim: int = 64
    detach_class_embeddings: bool = False


class Projector(nn.Module):
    """Two-layer pointwise MLP (1x1 convolutions) from features to embeddings."""

    def __init__(self, in_dim: int, out_dim: int = 64):
        super().__init__()
        self.fc1 = nn.Conv2d(in_dim, in_dim, 1)
        self.fc2 = nn.Conv2d(in_dim, out_dim, 1)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


def bilinear_upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def project(features: torch.Tensor, target_size: tuple[int, int],
            projector: nn.Module) -> torch.Tensor:
    """MLP, bilinear upsampling to ``target_size``, then per-pixel L2 normalization.

    ``features`` is ``[B, D_f, h, w]``; the result is ``[B, D_e, H, W]``.
    """
    h, w = features.shape[-2:]
    if target_size[0] < h or target_size[1] < w:
        raise ShapeError(f"target size {tuple(target_size)} smaller than feature map {(h, w)}")
    z = bilinear_upsample(projector(features), target_size)
    return F.normalize(z, dim=1)


@dataclass
class ClassEmbeddings:
    vectors: torch.Tensor   # [K, D_e]
    present: torch.Tensor   # [K] bool

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


def class_embeddings(embeddings: torch.Tensor, labels: torch.Tensor,
                     num_classes: int) -> ClassEmbeddings:
    """Class-wise average of embeddings ``[B, D, H, W]`` over labels ``[B, H, W]``, renormalized."""
    d = embeddings.shape[1]
    z = embeddings.permute(0, 2, 3, 1).reshape(-1, d)
    y = labels.reshape(-1)
    valid = (y != IGNORE) & (y >= 0) & (y < num_classes)
    z, y = z[valid], y[valid]
    sums = torch.zeros(num_classes, d, dtype=z.dtype, device=z.device).index_add(0, y, z)
    counts = torch.bincount(y, minlength=num_classes)[:num_classes].to(z.dtype)
    means = sums / counts.clamp(min=1).unsqueeze(1)
    norms = means.norm(dim=1)
    present = (counts > 0) & (norms >= DEGENERATE_NORM)
    vectors = torch.where(present.unsqueeze(1),
                          means / norms.clamp(min=DEGENERATE_NORM).unsqueeze(1),
                          torch.zeros_like(means))
    return ClassEmbeddings(vectors, present)


def class_similarity(embeddings: torch.Tensor, labels: torch.Tensor,
                     class_emb: ClassEmbeddings) -> torch.Tensor:
    """Dot product of each pixel's embedding with its own class embedding.

    Returns ``[B, H, W]``; IGNORE pixels and pixels of absent classes are nan.
    """
    k = class_emb.num_classes
    valid = (labels != IGNORE) & (labels >= 0) & (labels < k)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    valid = valid & class_emb.present[safe]
    own = class_emb.vectors[safe]                      # [B, H, W, D]
    sim = (embeddings.permute(0, 2, 3, 1) * own).sum(-1)
    return torch.where(valid, sim, torch.full_like(sim, float("nan")))


def selection_count(k_percent: float, n: int) -> int:
    """``ceil(k% * n)`` evaluated exactly."""
    return math.ceil(Fraction(k_percent) * n / 100)


@dataclass(frozen=True)
class Selection:
    """Flat pixel indices into a ``[B, H, W]`` map, with the class of each pixel."""

    index: torch.Tensor   # [M] long, b * H * W + row * W + col
    label: torch.Tensor   # [M] long

    def __len__(self) -> int:
        return int(self.index.numel())

    @staticmethod
    def empty() -> "Selection":
        e = torch.zeros(0, dtype=torch.long)
        return Selection(e, e.clone())


def select_ice(similarities: torch.Tensor, labels: torch.Tensor, config: LccConfig) -> Selection:
    """Per class, the ceil(k% n_c) pixels with the lowest class similarity over the batch.

    Ties resolve by image index, then row-major pixel index. Pixels with nan
    similarity are not eligible.
    """
    s = similarities.detach().reshape(-1)
    y = labels.reshape(-1)
    eligible = ~torch.isnan(s)
    idx_all, lab_all = [], []
    for c in torch.unique(y[eligible]).tolist():
        members = torch.nonzero(eligible & (y == c)).flatten()
        n_sel = selection_count(config.k_percent, members.numel())
        if n_sel == 0:
            continue
        order = torch.sort(s[members], stable=True).indices[:n_sel]
        picked = members[order]
        idx_all.append(picked)
        lab_all.append(torch.full_like(picked, c))
    if not idx_all:
        return Selection.empty()
    return Selection(torch.cat(idx_all), torch.cat(lab_all))


@lru_cache(maxsize=None)
def neighbor_offsets(h: int) -> tuple[tuple[int, int], ...]:
    """The ``h`` grid offsets nearest the origin (self excluded), ties in row-major order."""
    r = int(math.ceil(math.sqrt(h))) + 1
    cand = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    cand.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))
    return tuple(cand[:h])


def _shifted(x: torch.Tensor, dy: int, dx: int, fill) -> torch.Tensor:
    """``out[..., i, j] = x[..., i + dy, j + dx]`` with ``fill`` outside the grid."""
    H, W = x.shape[-2:]
    out = torch.full_like(x, fill)
    ys, yd = slice(max(dy, 0), H + min(dy, 0)), slice(max(-dy, 0), H + min(-dy, 0))
    xs, xd = slice(max(dx, 0), W + min(dx, 0)), slice(max(-dx, 0), W + min(-dx, 0))
    out[..., yd, xd] = x[..., ys, xs]
    return out


@torch.no_grad()
def boundary_mask(labels: torch.Tensor, config: LccConfig) -> torch.Tensor:
    """Pixels with at least one differently-labeled non-IGNORE pixel among their h nearest.

    Neighborhoods are truncated at the image border. IGNORE pixels are neither
    boundary pixels nor witnesses.
    """
    flagged = torch.zeros(labels.shape, dtype=torch.bool, device=labels.device)
    for dy, dx in neighbor_offsets(config.neighborhood_h):
        nb = _shifted(labels, dy, dx, IGNORE)
        flagged |= (nb != IGNORE) & (nb != labels)
    return flagged & (labels != IGNORE)


@torch.no_grad()
def boundary_similarity(embeddings: torch.Tensor, boundary: torch.Tensor,
                        config: LccConfig) -> torch.Tensor:
    """Minimum dot product between a boundary pixel and its h nearest in-image pixels.

    ``embeddings`` is ``[B, D, H, W]``, ``boundary`` ``[B, H, W]``; non-boundary
    pixels are nan.
    """
    B, D, H, W = embeddings.shape
    out = torch.full((B, H, W), float("nan"), dtype=embeddings.dtype, device=embeddings.device)
    pos = torch.nonzero(boundary)
    if pos.numel() == 0:
        return out
    offs = torch.tensor(neighbor_offsets(config.neighborhood_h), device=embeddings.device)
    flat = embeddings.permute(0, 2, 3, 1).reshape(-1, D).contiguous()
    for chunk in pos.split(256):
        b, i, j = chunk.unbind(1)
        center = flat[(b * H + i) * W + j]                                  # [n, D]
        ni = i[:, None] + offs[None, :, 0]
        nj = j[:, None] + offs[None, :, 1]
        inside = (ni >= 0) & (ni < H) & (nj >= 0) & (nj < W)
        lin = (b[:, None] * H + ni.clamp(0, H - 1)) * W + nj.clamp(0, W - 1)
        nb = flat.index_select(0, lin.flatten()).view(lin.shape[0], lin.shape[1], D)   # [n, h, D]
        dots = torch.bmm(nb, center.unsqueeze(2)).squeeze(2)
        dots = torch.where(inside, dots, torch.full_like(dots, float("inf")))
        out[b, i, j] = dots.min(dim=1).values
    return out


def select_bce(s_b: torch.Tensor, labels: torch.Tensor, config: LccConfig) -> Selection:
    """The ceil(k% n_b) boundary pixels with the highest boundary similarity over the batch."""
    s = s_b.detach().reshape(-1)
    members = torch.nonzero(~torch.isnan(s)).flatten()
    n_sel = selection_count(config.k_percent, members.numel())
    if n_sel == 0:
        return Selection.empty()
    order = torch.sort(-s[members], stable=True).indices[:n_sel]
    picked = members[order]
    return Selection(picked, labels.reshape(-1)[picked])


@dataclass
class LowContrastSet:
    embeddings: torch.Tensor   # [M, D]
    labels: torch.Tensor       # [M]
    labeled: torch.Tensor      # [M] bool, origin of each entry
    index: torch.Tensor        # [M] flat pixel index in the source batch

    def __len__(self) -> int:
        return int(self.labels.numel())


def merge_selections(*selections: Selection) -> Selection:
    """Union of selections, keeping the first occurrence of each pixel."""
    parts = [s for s in selections if len(s)]
    if not parts:
        return Selection.empty()
    index = torch.cat([s.index for s in parts])
    label = torch.cat([s.label for s in parts])
    seen, keep = set(), []
    for n, v in enumerate(index.tolist()):
        if v not in seen:
            seen.add(v)
            keep.append(n)
    keep = torch.tensor(keep, dtype=torch.long)
    return Selection(index[keep], label[keep])


def gather_set(embeddings: torch.Tensor, selection: Selection,
               labeled_pixels: int = 0) -> LowContrastSet:
    """Embeddings of the selected pixels; flat indices below ``labeled_pixels`` are labeled-origin."""
    d = embeddings.shape[1]
    flat = embeddings.permute(0, 2, 3, 1).reshape(-1, d)
    return LowContrastSet(flat[selection.index], selection.label,
                          selection.index < labeled_pixels, selection.index)


def lcc_loss(entries: LowContrastSet, class_emb: ClassEmbeddings, config: LccConfig) -> torch.Tensor:
    """Contrastive loss of the low-contrast set against the class embeddings.

    For an anchor of class c the positive logit is ``z . zbar_c / tau`` and the
    negatives are ``z_j . zbar_c / tau`` over every entry not of class c. Classes
    without anchors are left out of the class average.
    """
    vectors = class_emb.vectors
    if config.detach_class_embeddings:
        vectors = vectors.detach()
    if len(entries) == 0:
        return vectors.sum() * 0.0
    logits = entries.embeddings @ vectors.T / config.tau       # [M, K]
    y = entries.labels
    per_class = []
    for c in torch.unique(y).tolist():
        anchor = y == c
        pos = logits[anchor, c]
        neg = logits[~anchor, c]
        if neg.numel() == 0:
            per_class.append(pos.sum() * 0.0)
            continue
        lse_neg = torch.logsumexp(neg, dim=0)
        per_class.append((torch.logaddexp(pos, lse_neg) - pos).mean())
    return torch.stack(per_class).mean()


def interclass_similarity(class_emb: ClassEmbeddings) -> float | None:
    """Mean pairwise dot product between distinct present class embeddings."""
    v = class_emb.vectors[class_emb.present].detach().double()
    n = v.shape[0]
    if n < 2:
        return None
    g = v @ v.T
    iu = torch.triu_indices(n, n, offset=1)
    return float(g[iu[0], iu[1]].mean())


def save_similarity_heatmap(s_b: torch.Tensor, path: str | Path) -> None:
    """Write a ``[H, W]`` similarity map as 8-bit grayscale, [-1, 1] -> [0, 255]; nan -> 0."""
    a = s_b.detach().cpu().double().numpy()
    a = np.nan_to_num(a, nan=-1.0).clip(-1.0, 1.0)
    img = np.rint((a + 1.0) * 127.5).astype(np.uint8)
    PILImage.fromarray(img, mode="L").save(path)
