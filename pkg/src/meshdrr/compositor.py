"""Distance-map algebra and polychromatic Beer-Lambert imaging.

Raw maps are the path lengths each closed mesh produces on its own. The body
contains the bones and organs and air fills the rest of the source-to-pixel
segment, so effective per-material lengths come from subtracting nested maps:

    air_eff  = air_raw  - body
    body_eff = body     - bones - sum(organs)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ContainmentError, DimensionError, MaterialError, MissingForwardError
from .geometry import ProjectionCamera
from .rasterizer import DistanceMap

log = logging.getLogger(__name__)

EPS_MM = 1e-6
VIOLATION_MM = 0.1
RESERVED = ("air", "body", "bones")


@dataclass(frozen=True, eq=False)
class MaterialTable:
    """Linear attenuation coefficient (1/mm) per material over photon energy (keV)."""

    entries: Dict[str, tuple]

    def __post_init__(self):
        clean = {}
        for label, (energies, mu) in self.entries.items():
            e = np.atleast_1d(np.asarray(energies, dtype=float))
            m = np.atleast_1d(np.asarray(mu, dtype=float))
            if e.shape != m.shape or e.ndim != 1 or e.size == 0:
                raise MaterialError(f"{label}: energy and mu columns must be equal-length 1D")
            if np.any(np.diff(e) <= 0):
                raise MaterialError(f"{label}: energies must be strictly increasing")
            if np.any(m < 0):
                raise MaterialError(f"{label}: attenuation must be non-negative")
            clean[label] = (e, m)
        object.__setattr__(self, "entries", clean)

    @classmethod
    def constant(cls, **mu):
        """Energy-independent coefficients, e.g. ``constant(body=0.02, bones=0.05)``."""
        return cls({k: ([1.0], [v]) for k, v in mu.items()})

    def __contains__(self, label):
        return label in self.entries

    def mu(self, label, energies) -> np.ndarray:
        """Linear interpolation in energy, held constant past the table ends."""
        if label not in self.entries:
            raise MaterialError(f"no attenuation table for material {label!r}")
        e, m = self.entries[label]
        return np.interp(np.asarray(energies, dtype=float), e, m)


@dataclass(frozen=True, eq=False)
class Spectrum:
    energies: np.ndarray
    weights: np.ndarray
    name: str = "spectrum"

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.energies, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if e.shape != w.shape or e.ndim != 1 or e.size == 0:
            raise ValueError("spectrum needs equal-length, non-empty energy and weight columns")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("spectrum weights must be non-negative with a positive sum")
        order = np.argsort(e, kind="stable")
        object.__setattr__(self, "energies", e[order])
        object.__setattr__(self, "weights", w[order])

    @classmethod
    def monoenergetic(cls, energy=60.0, weight=1.0):
        return cls([energy], [weight], name=f"mono{energy:g}")

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def _as_array(m):
    if m is None:
        return None
    if isinstance(m, DistanceMap):
        return m.values
    return np.asarray(m, dtype=float)


@dataclass(eq=False)
class SceneStack:
    """Raw per-object path-length maps for one view.

    After :func:`containment_subtract`, ``effective`` holds one disjoint
    path length per material label and ``clamped`` the pixels where a small
    negative difference was rounded up to zero.
    """

    air: np.ndarray
    body: Optional[np.ndarray] = None
    bones: Optional[np.ndarray] = None
    organs: Dict[str, np.ndarray] = field(default_factory=dict)
    effective: Optional[Dict[str, np.ndarray]] = None
    clamped: Optional[Dict[str, np.ndarray]] = None

    def __post_init__(self):
        self.air = _as_array(self.air)
        self.body = _as_array(self.body)
        self.bones = _as_array(self.bones)
        self.organs = {k: _as_array(v) for k, v in self.organs.items()}
        for k in self.organs:
            if k in RESERVED:
                raise ValueError(f"organ name {k!r} collides with a reserved label")
        for name, m in self.raw_maps().items():
            if m.shape != self.air.shape:
                raise DimensionError(f"map {name!r} has shape {m.shape}, air has {self.air.shape}")

    @property
    def shape(self):
        return self.air.shape

    def raw_maps(self) -> Dict[str, np.ndarray]:
        out = {"air": self.air}
        if self.body is not None:
            out["body"] = self.body
        if self.bones is not None:
            out["bones"] = self.bones
        out.update(self.organs)
        return out

    def labels(self):
        return list(self.raw_maps())


@dataclass(eq=False)
class TransmissionImage:
    values: np.ndarray
    spectrum_id: str = ""
    camera_id: str = ""

    @property
    def shape(self):
        return self.values.shape


def air_distance_map(cam: ProjectionCamera) -> DistanceMap:
    """Source-to-pixel-centre Euclidean distance for every pixel."""
    d = np.linalg.norm(cam.detector.pixel_centers() - cam.source_position, axis=-1)
    return DistanceMap.from_values(d, "air")


def _check(name, eff, clamped):
    bad = eff < -VIOLATION_MM
    if bad.any():
        rows, cols = np.nonzero(bad)
        pix = list(zip(rows.tolist(), cols.tolist()))
        worst = float(eff.min())
        raise ContainmentError(
            f"{name}: effective path length {worst:.3f} mm at {len(pix)} pixel(s), "
            f"first (row, col) = {pix[:5]}", pix)
    small = (eff < -EPS_MM) & ~bad
    if small.any():
        log.warning("%s: %d pixels slightly negative (min %.2e mm), clamped",
                    name, int(small.sum()), float(eff.min()))
    neg = eff < 0
    clamped[name] = neg
    return np.where(neg, 0.0, eff)


def containment_subtract(stack: SceneStack) -> SceneStack:
    zeros = np.zeros(stack.shape)
    body = stack.body if stack.body is not None else zeros
    inner = zeros.copy()
    if stack.bones is not None:
        inner = inner + stack.bones
    for m in stack.organs.values():
        inner = inner + m
    clamped = {}
    eff = {"air": _check("air", stack.air - body, clamped)}
    if stack.body is not None or stack.bones is not None or stack.organs:
        eff["body"] = _check("body", body - inner, clamped)
    if stack.bones is not None:
        eff["bones"] = stack.bones
        clamped["bones"] = np.zeros(stack.shape, bool)
    for k, m in stack.organs.items():
        eff[k] = m
        clamped[k] = np.zeros(stack.shape, bool)
    if stack.bones is not None and len(stack.organs):
        overlap = (stack.bones > 0) & (sum(stack.organs.values()) > 0)
        if overlap.any():
            log.warning("bones and organs overlap on %d pixels; body is reduced by both",
                        int(overlap.sum()))
    return SceneStack(stack.air, stack.body, stack.bones, dict(stack.organs), eff, clamped)


def _ensure_effective(stack):
    return stack if stack.effective is not None else containment_subtract(stack)


def _attenuation_terms(stack, spectrum, materials):
    """Per energy (ascending): weight * exp(-sum_p mu_p L_p), shape (n_E, H, W), and mu table."""
    eff = stack.effective
    for label in eff:
        if label not in materials:
            raise MaterialError(f"no attenuation table for material {label!r}")
    mus = {label: materials.mu(label, spectrum.energies) for label in eff}
    terms = np.empty((len(spectrum.energies),) + stack.shape)
    for i, w in enumerate(spectrum.weights):
        expo = np.zeros(stack.shape)
        for label, L in eff.items():
            expo = expo + mus[label][i] * L
        terms[i] = w * np.exp(-expo)
    return terms, mus


def beer_lambert(stack: SceneStack, spectrum: Spectrum, materials: MaterialTable,
                 camera_id="") -> TransmissionImage:
    """I = sum_E I0(E) exp(-sum_p mu(p, E) L_p), summed in ascending energy."""
    stack = _ensure_effective(stack)
    terms, _ = _attenuation_terms(stack, spectrum, materials)
    image = np.zeros(stack.shape)
    for t in terms:
        image = image + t
    return TransmissionImage(image, spectrum.name, camera_id)


def backward_beer_lambert(image_grad, stack: SceneStack, spectrum: Spectrum,
                          materials: MaterialTable) -> Dict[str, np.ndarray]:
    """dC/d(raw map) for every label in the stack.

    The effective-length adjoint is pushed through the transpose of the
    containment subtraction; pixels clamped to zero there get no gradient.
    """
    if stack is None:
        raise MissingForwardError("backward_beer_lambert needs the forward scene stack")
    g = np.asarray(image_grad, dtype=float)
    if g.shape != stack.shape:
        raise DimensionError(f"image gradient {g.shape} != image {stack.shape}")
    stack = _ensure_effective(stack)
    terms, mus = _attenuation_terms(stack, spectrum, materials)
    g_eff = {}
    for label in stack.effective:
        acc = np.zeros(stack.shape)
        for i in range(len(spectrum.energies)):
            acc = acc - mus[label][i] * terms[i]
        g_eff[label] = np.where(stack.clamped[label], 0.0, g * acc)
    zeros = np.zeros(stack.shape)
    g_body_eff = g_eff.get("body", zeros)
    out = {"air": g_eff["air"]}
    if stack.body is not None:
        out["body"] = g_eff.get("body", zeros) - g_eff["air"]
    if stack.bones is not None:
        out["bones"] = g_eff["bones"] - g_body_eff
    for k in stack.organs:
        out[k] = g_eff[k] - g_body_eff
    return out
