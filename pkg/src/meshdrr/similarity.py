"""Normalized gradient correlation (NGC) and its exact adjoint.

NGC averages, over the x and y image-gradient channels, the zero-mean
normalized cross-correlation between the two images' gradients. Gradients
are central differences with replicated borders.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DimensionError, MissingForwardError, NgcUndefinedError

EPS_VAR = 1e-12


def _values(img):
    return np.asarray(getattr(img, "values", img), dtype=float)


def image_gradients(img):
    """(d/dx, d/dy) with central differences and replicate padding."""
    p = np.pad(img, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2
    return gx, gy


def image_gradients_adjoint(gx_bar, gy_bar):
    """Transpose of :func:`image_gradients` applied to channel cotangents."""
    H, W = gx_bar.shape
    out = np.zeros((H + 2, W + 2))
    out[1:-1, 2:] += gx_bar / 2
    out[1:-1, :-2] -= gx_bar / 2
    out[2:, 1:-1] += gy_bar / 2
    out[:-2, 1:-1] -= gy_bar / 2
    # fold replicated borders back onto the edge pixels
    out[:, 1] += out[:, 0]
    out[:, -2] += out[:, -1]
    out[1, :] += out[0, :]
    out[-2, :] += out[-1, :]
    return out[1:-1, 1:-1]


class NgcLoss:
    """NGC with cached intermediates for the backward pass.

    ``image_b`` is the fixed target; gradients are taken w.r.t. ``image_a``.
    A channel only counts when it varies (variance above ``eps_var``) in both
    images.
    """

    def __init__(self, eps_var: float = EPS_VAR):
        self.eps_var = eps_var
        self._cache = None

    def forward(self, image_a, image_b) -> float:
        a = _values(image_a)
        b = _values(image_b)
        if a.shape != b.shape:
            raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
        n = a.size
        chans = []
        for ca, cb in zip(image_gradients(a), image_gradients(b)):
            za = ca - ca.mean()
            zb = cb - cb.mean()
            saa = np.sum(za * za)
            sbb = np.sum(zb * zb)
            if saa / n <= self.eps_var or sbb / n <= self.eps_var:
                chans.append(None)
                continue
            saa = max(saa, n * self.eps_var)
            sbb = max(sbb, n * self.eps_var)
            chans.append((za, zb, saa, sbb, np.sum(za * zb) / np.sqrt(saa * sbb)))
        active = [c for c in chans if c is not None]
        if not active:
            raise NgcUndefinedError("no gradient channel varies in both images")
        value = float(np.mean([c[4] for c in active]))
        self._cache = (a.shape, chans, len(active))
        return value

    __call__ = forward

    def backward(self) -> np.ndarray:
        """dNGC/d(image_a) for the most recent forward call."""
        if self._cache is None:
            raise MissingForwardError("NgcLoss.backward called before forward")
        shape, chans, n_active = self._cache
        bars = []
        for c in chans:
            if c is None:
                bars.append(np.zeros(shape))
                continue
            za, zb, saa, sbb, val = c
            bars.append((zb / np.sqrt(saa * sbb) - val * za / saa) / n_active)
        return image_gradients_adjoint(*bars)

    def map(self) -> np.ndarray:
        """Per-pixel contributions whose sum is the NGC value."""
        if self._cache is None:
            raise MissingForwardError("NgcLoss.map called before forward")
        shape, chans, n_active = self._cache
        out = np.zeros(shape)
        for c in chans:
            if c is not None:
                za, zb, saa, sbb, _ = c
                out += za * zb / np.sqrt(saa * sbb) / n_active
        return out


def ngc(image_a, image_b, eps_var: float = EPS_VAR) -> float:
    return NgcLoss(eps_var).forward(image_a, image_b)


def ngc_backward(image_a, image_b, eps_var: float = EPS_VAR,
                 loss: Optional[NgcLoss] = None) -> np.ndarray:
    if loss is None:
        loss = NgcLoss(eps_var)
        loss.forward(image_a, image_b)
    return loss.backward()
