"""Figures and 8-bit previews. Previews are for looking at; PFM stays the source of truth."""
from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.image as mpimg  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

# no version or timestamp chunks, so reruns give identical files
_PNG_META = {"Software": None}


def log_compress(image, floor=None) -> np.ndarray:
    """Map a non-negative image to uint8 with log(1 + x / floor) scaling."""
    a = np.asarray(getattr(image, "values", image), dtype=float)
    a = np.where(np.isfinite(a), np.maximum(a, 0.0), 0.0)
    top = a.max()
    if top <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    if floor is None:
        floor = top * 1e-3
    c = np.log1p(a / floor) / np.log1p(top / floor)
    return np.round(255 * c).astype(np.uint8)


def save_preview(path, image, floor=None):
    """Grayscale PNG, row 0 at the top."""
    path = Path(path)
    mpimg.imsave(path, log_compress(image, floor), cmap="gray", vmin=0, vmax=255,
                 metadata=_PNG_META)
    return path


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    log.debug("wrote %s", path)
    return path


def _show(ax, img, title, cmap="gray", **kw):
    im = ax.imshow(np.asarray(getattr(img, "values", img)), cmap=cmap, interpolation="nearest", **kw)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    return im


def plot_render(path, image, distance_maps: dict):
    """Transmission image next to each object's distance map."""
    n = 1 + len(distance_maps)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3.2), squeeze=False)
    _show(axes[0, 0], image, "transmission")
    for ax, (label, dmap) in zip(axes[0, 1:], sorted(distance_maps.items())):
        im = _show(ax, dmap, f"{label} [mm]", cmap="viridis")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    return _save(fig, path)


def plot_registration(path, target, initial, final, ngc_map=None):
    """Target, initial and final renders, plus the final per-pixel NGC contributions."""
    panels = [(target, "target"), (initial, "initial"), (final, "final")]
    n = len(panels) + (ngc_map is not None)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3.2), squeeze=False)
    for ax, (img, title) in zip(axes[0], panels):
        _show(ax, img, title)
    if ngc_map is not None:
        m = np.asarray(ngc_map)
        lim = float(np.abs(m).max()) or 1.0
        im = _show(axes[0, -1], m, "NGC contribution", cmap="RdBu_r", vmin=-lim, vmax=lim)
        fig.colorbar(im, ax=axes[0, -1], fraction=0.046, pad=0.04)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(path, losses):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(np.arange(len(losses)), losses, lw=1.2, color="k")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss (-NGC)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
