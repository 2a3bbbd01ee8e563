"""Signed path-length (l-buffer) rasterization and its adjoint.

Every pixel keeps up to ``K`` fragments: the faces its centre ray crosses,
each with the metric distance from the crossing to the detector and the
face's entry/exit sign. The path length through the object is the signed
sum of those distances, so fragments need not be depth sorted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DimensionError, MissingForwardError
from .geometry import ProjectedMesh, ProjectionCamera, TriangleMesh, face_orientation_signs, project_mesh
from .parallel import run_bands

log = logging.getLogger(__name__)

DEFAULT_K = 16
# resolved lengths in (-NEG_CLAMP_MM, 0) are float noise and clamp to zero
NEG_CLAMP_MM = 1e-6
# fixed block height for the gradient scatter, independent of thread count
BACKWARD_BAND = 16


@dataclass(eq=False)
class FragmentBuffer:
    face: np.ndarray      # (H, W, K) int64, -1 for empty slots
    z: np.ndarray         # (H, W, K) distance to detector plane, mm
    sign: np.ndarray      # (H, W, K) int8, +1 entering, -1 exiting
    bary: np.ndarray      # (H, W, K, 3) world barycentrics in face-slot order
    count: np.ndarray     # (H, W) int32
    overflow: np.ndarray  # (H, W) bool
    label: str = ""

    @property
    def K(self) -> int:
        return self.face.shape[2]

    @property
    def shape(self):
        return self.count.shape

    @classmethod
    def empty(cls, shape, K, label=""):
        H, W = shape
        return cls(np.full((H, W, K), -1, np.int64), np.zeros((H, W, K)),
                   np.zeros((H, W, K), np.int8), np.zeros((H, W, K, 3)),
                   np.zeros((H, W), np.int32), np.zeros((H, W), bool), label)

    def fragments(self, row, col):
        """(face, sign, z) tuples recorded at one pixel."""
        n = self.count[row, col]
        return [(int(self.face[row, col, k]), int(self.sign[row, col, k]),
                 float(self.z[row, col, k])) for k in range(n)]


@dataclass(eq=False)
class DistanceMap:
    values: np.ndarray    # (H, W) path length, mm
    valid: np.ndarray     # (H, W) pixels whose own fragments resolved cleanly
    repaired: np.ndarray  # (H, W) pixels overwritten from a valid neighbour
    label: str = ""
    sign_sum: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_values(cls, values, label=""):
        v = np.asarray(values, dtype=float)
        return cls(v, np.ones(v.shape, bool), np.zeros(v.shape, bool), label)


@dataclass(eq=False)
class DistanceMapAdjoint:
    vertex_grad: np.ndarray  # (N_v, 3) dC/d(world vertex)
    upstream: np.ndarray     # (H, W) dC/dL actually propagated


def rasterize_lbuffer(proj: ProjectedMesh, cam: ProjectionCamera, K: int = DEFAULT_K,
                      threads: Optional[int] = None) -> FragmentBuffer:
    if K < 2 or K % 2:
        raise ValueError(f"fragment capacity K must be even and >= 2, got {K}")
    shape = cam.detector.shape
    buf = FragmentBuffer.empty(shape, K, proj.label)
    sx = np.ascontiguousarray(proj.screen[:, 0])
    sy = np.ascontiguousarray(proj.screen[:, 1])
    fsign = face_orientation_signs(proj)
    scale = cam.ray_scale()
    faces = np.ascontiguousarray(proj.faces, dtype=np.int64)

    def band(r0, r1):
        _kernels.raster_band(r0, r1, sx, sy, proj.source_depth, proj.plane_height, faces,
                             fsign, scale, K, buf.face, buf.z, buf.sign, buf.bary,
                             buf.count, buf.overflow)

    run_bands(band, shape[0], threads)
    if buf.overflow.any():
        log.warning("%s: %d pixels exceeded K=%d fragments", proj.label or "mesh",
                    int(buf.overflow.sum()), K)
    return buf


def resolve_distance(buf: FragmentBuffer, repair: bool = True,
                     threads: Optional[int] = None) -> DistanceMap:
    """Signed fragment sum per pixel, then the neighbour repair of bad pixels."""
    values = np.zeros(buf.shape)
    sign_sum = np.zeros(buf.shape, np.int64)

    def band(r0, r1):
        _kernels.resolve_band(r0, r1, buf.face, buf.z, buf.sign, buf.count, values, sign_sum)

    run_bands(band, buf.shape[0], threads)
    noise = (values < 0) & (values >= -NEG_CLAMP_MM)
    values[noise] = 0.0
    valid = (sign_sum == 0) & ~buf.overflow & (values >= 0)
    dmap = DistanceMap(values, valid, np.zeros(buf.shape, bool), buf.label, sign_sum)
    if repair and not valid.all():
        dmap = repair_pixels(dmap)
    return dmap


def repair_pixels(dmap: DistanceMap) -> DistanceMap:
    """Copy the nearest valid value (Chebyshev rings, row-major ties) into invalid pixels."""
    invalid = ~dmap.valid
    if not invalid.any():
        return DistanceMap(dmap.values.copy(), dmap.valid.copy(),
                           np.zeros(dmap.shape, bool), dmap.label, dmap.sign_sum)
    values, repaired = _kernels.repair_invalid(np.ascontiguousarray(dmap.values, dtype=float),
                                               np.ascontiguousarray(invalid))
    return DistanceMap(values, dmap.valid.copy(), repaired, dmap.label, dmap.sign_sum)


def backward_distance(buf: FragmentBuffer, dmap: DistanceMap, upstream, proj: ProjectedMesh,
                      cam: ProjectionCamera, threads: Optional[int] = None) -> DistanceMapAdjoint:
    """Pull dC/dL back to world vertex positions.

    Each fragment receives dC/dz = dC/dL * sign. Fragment signs and pixel
    coverage are piecewise constant and contribute no gradient. Invalid and
    repaired pixels are cut off entirely.
    """
    if buf is None or dmap is None or proj is None:
        raise MissingForwardError("backward_distance needs the forward fragment buffer and map")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != buf.shape:
        raise DimensionError(f"upstream gradient {upstream.shape} != image {buf.shape}")
    if (buf.face.shape[:2] != dmap.shape) or np.any(buf.face[..., 0][buf.count > 0] < 0):
        raise MissingForwardError("fragment buffer does not match the distance map")
    grad_mask = np.ascontiguousarray(dmap.valid & ~dmap.repaired)
    masked = np.where(grad_mask, upstream, 0.0)
    tri = proj.world_vertices[proj.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    ray_dir = cam.ray_directions()
    faces = np.ascontiguousarray(proj.faces, dtype=np.int64)
    n_v = proj.n_vertices

    def band(r0, r1):
        out = np.zeros((n_v, 3))
        _kernels.backward_band(r0, r1, buf.face, buf.sign, buf.bary, buf.count, grad_mask,
                               masked, faces, normals, ray_dir, out)
        return out

    parts = run_bands(band, buf.shape[0], threads, band=BACKWARD_BAND)
    total = np.zeros((n_v, 3))
    for p in parts:
        total += p
    return DistanceMapAdjoint(total, masked)


def render_distance(mesh: TriangleMesh, cam: ProjectionCamera, K: int = DEFAULT_K,
                    threads: Optional[int] = None):
    """Project, rasterize and resolve one mesh. Returns (map, buffer, projection)."""
    proj = project_mesh(mesh, cam)
    buf = rasterize_lbuffer(proj, cam, K, threads)
    return resolve_distance(buf, threads=threads), buf, proj
