"""Heatmap figures (matplotlib, Agg) and portable graymap export."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataIOError  # noqa: E402

CMAP = "RdBu_r"
plt.rcParams["svg.hashsalt"] = "diffinv"  # stable element ids, so reruns write identical files


def _save(fig, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"Date": None} if path.suffix == ".svg" else {}
        fig.savefig(path, metadata=meta, bbox_inches="tight")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def heatmap_grid(images, path, titles=None, ncols=None, vmin=None, vmax=None, cmap=CMAP, suptitle=None):
    """Render a list of 2-D arrays as a grid of heatmaps sharing one colour scale."""
    images = [np.asarray(im, dtype=float) for im in images]
    n = len(images)
    ncols = ncols or min(n, 6)
    nrows = math.ceil(n / ncols)
    vmin = min(float(im.min()) for im in images) if vmin is None else vmin
    vmax = max(float(im.max()) for im in images) if vmax is None else vmax
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols + 0.8, 1.6 * nrows + 0.4), squeeze=False)
    mappable = None
    for k, ax in enumerate(axes.flat):
        ax.set_xticks([])
        ax.set_yticks([])
        if k >= n:
            ax.axis("off")
            continue
        mappable = ax.imshow(images[k], cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
        if titles:
            ax.set_title(titles[k], fontsize=7)
    if mappable is not None:
        fig.colorbar(mappable, ax=axes.ravel().tolist(), shrink=0.8)
    if suptitle:
        fig.suptitle(suptitle, fontsize=9)
    return _save(fig, path)


def line_plot(x, ys, path, labels=None, xlabel="", ylabel="", logy=False):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for k, yv in enumerate(ys):
        ax.plot(x, yv, marker="o", ms=3, label=labels[k] if labels else None)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if labels:
        ax.legend(fontsize=7)
    return _save(fig, path)


def write_pgm(image, path, vmin=None, vmax=None):
    """8-bit binary PGM, linearly scaled to ``[vmin, vmax]``."""
    img = np.asarray(image, dtype=float)
    lo = float(img.min()) if vmin is None else vmin
    hi = float(img.max()) if vmax is None else vmax
    scaled = np.zeros_like(img) if hi <= lo else np.clip((img - lo) / (hi - lo), 0, 1)
    data = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path
