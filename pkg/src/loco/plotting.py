"""Matplotlib renderings of the tidy curve tables written by ``loco curves``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _by(rows, *keys):
    out = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append((int(r["epoch"]), float(r["value"])))
    return out


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_thresholds(rows: list[dict], path: str | Path) -> Path:
    """Effective per-class thresholds (solid) and smoothed local confidences (dotted)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (cls, series), pts in sorted(_by(rows, "class", "series").items()):
        x, y = zip(*pts)
        style = "-" if series == "threshold" else ":"
        ax.plot(x, y, style, label=f"{series} c{cls}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("value")
    ax.set_title("pseudo-label thresholds")
    ax.legend(fontsize=7)
    return _save(fig, Path(path))


def plot_utilization(rows: list[dict], path: str | Path) -> Path:
    """Per-class utilization; the fixed-threshold baseline is dashed."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    colors = {}
    for (cls, series), pts in sorted(_by(rows, "class", "series").items()):
        x, y = zip(*pts)
        line, = ax.plot(x, y, "--" if series == "fixed" else "-", color=colors.get(cls),
                        label=f"{series} c{cls}")
        colors.setdefault(cls, line.get_color())
    ax.set_xlabel("epoch")
    ax.set_ylabel("utilization")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    return _save(fig, Path(path))


def plot_interclass(rows: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pts = [(int(r["epoch"]), float(r["value"])) for r in rows if r["value"] != ""]
    if pts:
        ax.plot(*zip(*pts), "-o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean inter-class similarity")
    return _save(fig, Path(path))
