"""Segmentation networks, teacher EMA and checkpoints.

Any ``nn.Module`` whose ``forward(images)`` returns ``(logits [B, K, H, W],
features [B, D_f, h, w])`` can stand in for the reference networks below.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import NumericFault, StructuralError

CHECKPOINT_VERSION = 1


def _conv_bn(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


@dataclass(frozen=True)
class ArchSpec:
    name: str = "segnet"
    in_channels: int = 3
    num_classes: int = 3
    channels: tuple = (16, 32, 64, 128)
    feature_dim: int = 64


class SegNet(nn.Module):
    """Four stride-2 encoder stages and a two-step decoder with skip connections.

    The penultimate feature map has ``feature_dim`` channels at 1/4 resolution.
    """

    def __init__(self, spec: ArchSpec = ArchSpec()):
        super().__init__()
        c1, c2, c3, c4 = spec.channels
        self.spec = spec
        self.enc1 = _conv_bn(spec.in_channels, c1, 2)
        self.enc2 = _conv_bn(c1, c2, 2)
        self.enc3 = _conv_bn(c2, c3, 2)
        self.enc4 = _conv_bn(c3, c4, 2)
        self.dec1 = _conv_bn(c4 + c3, c3, 1)
        self.dec2 = _conv_bn(c3 + c2, spec.feature_dim, 1)
        self.classifier = nn.Conv2d(spec.feature_dim, spec.num_classes, 1)

    def forward(self, x):
        size = x.shape[-2:]
        e1 = _checked("enc1", self.enc1(x))
        e2 = _checked("enc2", self.enc2(e1))
        e3 = _checked("enc3", self.enc3(e2))
        e4 = _checked("enc4", self.enc4(e3))
        d = F.interpolate(e4, size=e3.shape[-2:], mode="bilinear", align_corners=False)
        d = _checked("dec1", self.dec1(torch.cat([d, e3], 1)))
        d = F.interpolate(d, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        feats = _checked("dec2", self.dec2(torch.cat([d, e2], 1)))
        logits = _checked("classifier", self.classifier(feats))
        logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        return logits, feats


class TinySegNet(nn.Module):
    """Two-layer network (3x3 conv + ReLU, then 1x1 classifier) at full resolution."""

    def __init__(self, spec: ArchSpec = ArchSpec(name="tiny", feature_dim=8)):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(spec.in_channels, spec.feature_dim, 3, padding=1)
        self.classifier = nn.Conv2d(spec.feature_dim, spec.num_classes, 1)

    def forward(self, x):
        feats = _checked("conv", F.relu(self.conv(x)))
        return _checked("classifier", self.classifier(feats)), feats


ARCHITECTURES = {"segnet": SegNet, "tiny": TinySegNet}


def build_model(spec: ArchSpec) -> nn.Module:
    try:
        return ARCHITECTURES[spec.name](spec)
    except KeyError:
        raise StructuralError(f"unknown architecture {spec.name!r}") from None


def _checked(name: str, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericFault(f"non-finite activations in layer {name!r}")
    return x


def forward(model: nn.Module, images: torch.Tensor, mode: str = "eval"):
    """Run ``model`` and return ``(probs, features)``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    logits, feats = model(images)
    return logits.softmax(dim=1), feats


def _check_same_structure(a: nn.Module, b: nn.Module) -> None:
    sa, sb = a.state_dict(), b.state_dict()
    if sa.keys() != sb.keys():
        raise StructuralError("teacher and student have different parameter names")
    for k in sa:
        if sa[k].shape != sb[k].shape:
            raise StructuralError(f"shape mismatch for {k}: {tuple(sa[k].shape)} vs {tuple(sb[k].shape)}")


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> nn.Module:
    """``teacher <- alpha * teacher + (1 - alpha) * student`` for parameters; buffers are copied."""
    _check_same_structure(teacher, student)
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(alpha).add_(ps.detach(), alpha=1 - alpha)
    for bt, bs in zip(teacher.buffers(), student.buffers()):
        bt.copy_(bs)
    return teacher


@contextlib.contextmanager
def frozen_norm_stats(model: nn.Module):
    """Normalize with batch statistics but leave running statistics untouched."""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield model
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom


def snapshot(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


def serialize_parameters(model: nn.Module) -> bytes:
    """Deterministic byte serialization of the state dict (sorted keys, raw little-endian data)."""
    buf = io.BytesIO()
    for name, t in sorted(model.state_dict().items()):
        buf.write(name.encode())
        buf.write(str(tuple(t.shape)).encode())
        buf.write(str(t.dtype).encode())
        buf.write(t.detach().cpu().contiguous().numpy().tobytes())
    return buf.getvalue()


def checksum(model: nn.Module) -> str:
    return hashlib.sha256(serialize_parameters(model)).hexdigest()


def save_checkpoint(path: str | Path, spec: ArchSpec, **state) -> None:
    """Write a versioned checkpoint; ``state`` values are state dicts or picklable objects."""
    payload = {"version": CHECKPOINT_VERSION, "arch": asdict(spec)}
    for key, value in state.items():
        payload[key] = value.state_dict() if hasattr(value, "state_dict") else value
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise StructuralError(f"unsupported checkpoint version {payload.get('version')!r}")
    arch = dict(payload["arch"])
    arch["channels"] = tuple(arch["channels"])
    payload["arch"] = ArchSpec(**arch)
    return payload
