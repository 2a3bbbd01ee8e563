"""Mesh and camera primitives.

World coordinates are in millimetres. Detector pixel ``(i, j)`` (column,
row) has its centre at ``origin + pitch * (i * axis_u + j * axis_v)``; image
arrays are indexed ``[row, column]``.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CameraError, MeshError, ProjectionError

log = logging.getLogger(__name__)

# |normalized dot| below this counts as a face seen edge-on
EPS_PERP = 1e-8
# vertices this close (mm) beyond the detector plane are snapped onto it
PLANE_SNAP_MM = 1e-9


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WatertightReport:
    watertight: bool
    boundary_edges: list
    nonmanifold_edges: list


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh.

    Faces are wound counter-clockwise when seen from outside, so face normals
    from ``cross(v1 - v0, v2 - v0)`` point outward.
    """

    vertices: np.ndarray
    faces: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be N x 3, got shape {v.shape}")
        if f.size == 0 or v.size == 0:
            raise MeshError("empty mesh")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be N x 3, got shape {f.shape}")
        if not np.issubdtype(f.dtype, np.integer):
            if not np.all(np.equal(np.mod(f, 1), 0)):
                raise MeshError("face indices must be integers")
        f = f.astype(np.int64)
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError(
                f"face index out of range [0, {len(v)}): min {f.min()}, max {f.max()}")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate face(s) {np.flatnonzero(degenerate)[:10].tolist()}")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self, normalize=True) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def edge_report(self) -> WatertightReport:
        """Count face multiplicity of every undirected edge."""
        counts = Counter()
        for a, b, c in self.faces.tolist():
            for e in ((a, b), (b, c), (c, a)):
                counts[(min(e), max(e))] += 1
        boundary = sorted(e for e, n in counts.items() if n == 1)
        nonmanifold = sorted(e for e, n in counts.items() if n > 2)
        return WatertightReport(not boundary and not nonmanifold, boundary, nonmanifold)

    def is_watertight(self) -> bool:
        return self.edge_report().watertight

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.label)

    def transformed(self, rotation=None, translation=None) -> "TriangleMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return self.with_vertices(v)

    def flipped(self) -> "TriangleMesh":
        """Same surface with every face's winding reversed."""
        return TriangleMesh(self.vertices, self.faces[:, ::-1], self.label)


@dataclass(frozen=True, eq=False)
class DetectorGeometry:
    width_px: int
    height_px: int
    pitch_mm: float
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray

    def __post_init__(self):
        if int(self.width_px) < 1 or int(self.height_px) < 1:
            raise CameraError("detector must be at least 1 x 1 pixels")
        if not self.pitch_mm > 0:
            raise CameraError("pixel pitch must be positive")
        object.__setattr__(self, "width_px", int(self.width_px))
        object.__setattr__(self, "height_px", int(self.height_px))
        object.__setattr__(self, "pitch_mm", float(self.pitch_mm))
        for name in ("origin", "axis_u", "axis_v"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (3,):
                raise CameraError(f"{name} must be a 3-vector")
            object.__setattr__(self, name, _frozen(a))
        u, v = self.axis_u, self.axis_v
        if (abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9
                or abs(u @ v) > 1e-9):
            raise CameraError("detector axes must be orthonormal")

    @property
    def shape(self):
        return (self.height_px, self.width_px)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def pixel_to_world(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        y = np.asarray(y, dtype=float)[..., None]
        return self.origin + self.pitch_mm * (x * self.axis_u + y * self.axis_v)

    def pixel_centers(self) -> np.ndarray:
        """World position of every pixel centre, shape (H, W, 3)."""
        jj, ii = np.mgrid[0:self.height_px, 0:self.width_px]
        return self.pixel_to_world(ii, jj)

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "pitch_mm": self.pitch_mm,
            "origin": self.origin.tolist(),
            "axis_u": self.axis_u.tolist(),
            "axis_v": self.axis_v.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "DetectorGeometry":
        try:
            return cls(d["width_px"], d["height_px"], d["pitch_mm"],
                       d["origin"], d["axis_u"], d["axis_v"])
        except KeyError as e:
            raise CameraError(f"detector config missing key {e}") from None

    @classmethod
    def centered(cls, width_px, height_px, pitch_mm, center=(0.0, 0.0, 0.0),
                 axis_u=(1.0, 0.0, 0.0), axis_v=(0.0, 1.0, 0.0)) -> "DetectorGeometry":
        """Detector whose geometric centre sits at ``center``."""
        u = np.asarray(axis_u, float)
        v = np.asarray(axis_v, float)
        origin = (np.asarray(center, float)
                  - pitch_mm * ((width_px - 1) / 2 * u + (height_px - 1) / 2 * v))
        return cls(width_px, height_px, pitch_mm, origin, u, v)


def _null_space_point(P):
    _, _, vt = np.linalg.svd(P)
    c = vt[-1]
    if abs(c[3]) < 1e-12 * np.linalg.norm(c):
        raise CameraError("projection matrix centre is at infinity")
    return c[:3] / c[3]


@dataclass(frozen=True, eq=False)
class ProjectionCamera:
    """A 3x4 projection matrix bound to a physical detector.

    The source position is recovered from the right null space of ``matrix``;
    a supplied ``source_position`` is only checked against it.
    """

    matrix: np.ndarray
    detector: DetectorGeometry
    source_position: Optional[np.ndarray] = None
    name: str = "camera"

    def __post_init__(self):
        P = np.asarray(self.matrix, dtype=np.float64)
        if P.shape != (3, 4):
            raise CameraError(f"projection matrix must be 3 x 4, got {P.shape}")
        if np.linalg.matrix_rank(P[:, :3]) < 3:
            raise CameraError("projection matrix is rank deficient")
        src = _null_space_point(P)
        if self.source_position is not None:
            given = np.asarray(self.source_position, dtype=float)
            if np.linalg.norm(given - src) > 1e-6 * max(np.linalg.norm(src), 1.0):
                raise CameraError(
                    f"source {given.tolist()} inconsistent with projection matrix "
                    f"null space {src.tolist()}")
        object.__setattr__(self, "matrix", _frozen(P))
        object.__setattr__(self, "source_position", _frozen(src))
        det = self.detector
        n = det.normal
        height = n @ (det.origin - src)
        if abs(height) < 1e-9:
            raise CameraError("source lies on the detector plane")
        # unit normal pointing from the source towards the detector
        object.__setattr__(self, "_toward", _frozen(n * np.sign(height)))
        object.__setattr__(self, "_sdd", abs(float(height)))
        # check P maps detector pixel centres onto their own indices
        probes = np.array([[0, 0], [det.width_px - 1, 0], [0, det.height_px - 1],
                           [det.width_px - 1, det.height_px - 1]], dtype=float)
        world = det.pixel_to_world(probes[:, 0], probes[:, 1])
        xy = self.project_points(world)[:, :2]
        err = np.abs(xy - probes).max()
        if err > 1e-6 * max(det.width_px, det.height_px):
            raise CameraError(
                f"projection matrix disagrees with detector geometry by {err:.3g} px")

    @classmethod
    def from_geometry(cls, source, detector: DetectorGeometry, name="camera"):
        """Build the projection matrix of a point source and flat detector."""
        S = np.asarray(source, dtype=float)
        u, v = detector.axis_u, detector.axis_v
        n = detector.normal
        D = n @ (detector.origin - S)
        if D < 0:
            n, D = -n, -D
        a0 = ((u @ (S - detector.origin)) * n + D * u) / detector.pitch_mm
        a1 = ((v @ (S - detector.origin)) * n + D * v) / detector.pitch_mm
        A = np.vstack([a0, a1, n])
        P = np.hstack([A, -(A @ S)[:, None]])
        return cls(P, detector, S, name=name)

    @property
    def toward_detector(self) -> np.ndarray:
        """Unit detector normal oriented from the source to the detector."""
        return self._toward

    @property
    def source_detector_distance(self) -> float:
        return self._sdd

    @property
    def principal_point(self) -> np.ndarray:
        foot = self.source_position + self._sdd * self._toward
        return self.project_points(foot[None])[0, :2]

    @property
    def handedness(self) -> float:
        """+1 when (axis_u, axis_v, towards-source) is a right-handed frame."""
        return float(np.sign(self.detector.normal @ (-self._toward)))

    def project_points(self, points) -> np.ndarray:
        """Pixel (x, y) and homogeneous w for world points, shape (N, 3)."""
        p = np.asarray(points, dtype=float)
        h = p @ self.matrix[:, :3].T + self.matrix[:, 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.column_stack([h[:, 0] / h[:, 2], h[:, 1] / h[:, 2], h[:, 2]])

    def source_depth(self, points) -> np.ndarray:
        """Distance of points from the source plane, along the detector normal."""
        return (np.asarray(points, float) - self.source_position) @ self._toward

    def plane_height(self, points) -> np.ndarray:
        """Perpendicular distance of points from the detector plane (positive in front)."""
        return (self.detector.origin - np.asarray(points, float)) @ self._toward

    def ray_scale(self) -> np.ndarray:
        """Per pixel |source - pixel| / source-detector distance, shape (H, W)."""
        d = np.linalg.norm(self.detector.pixel_centers() - self.source_position, axis=-1)
        return d / self._sdd

    def ray_directions(self) -> np.ndarray:
        """Unit vectors from each pixel centre towards the source, shape (H, W, 3)."""
        d = self.source_position - self.detector.pixel_centers()
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ProjectedMesh:
    """A mesh mapped to detector coordinates.

    ``screen[:, 2]`` is the metric distance (mm) from each vertex to the
    detector plane measured along its own viewing ray.
    """

    screen: np.ndarray
    normals: np.ndarray
    faces: np.ndarray
    world_vertices: np.ndarray
    source_depth: np.ndarray
    plane_height: np.ndarray
    handedness: float = 1.0
    label: str = ""

    @property
    def n_vertices(self):
        return len(self.screen)


def project_mesh(mesh: TriangleMesh, cam: ProjectionCamera) -> ProjectedMesh:
    v = mesh.vertices
    w = cam.source_depth(v)
    if np.any(w <= 0):
        bad = np.flatnonzero(w <= 0)
        raise ProjectionError(
            f"{len(bad)} vertices at or behind the source plane (first: {bad[0]})")
    h = cam.plane_height(v)
    if np.any(h < -PLANE_SNAP_MM):
        bad = np.flatnonzero(h < -PLANE_SNAP_MM)
        raise ProjectionError(
            f"{len(bad)} vertices beyond the detector plane (first: {bad[0]})")
    h = np.maximum(h, 0.0)
    xyw = cam.project_points(v)
    dist = h * np.linalg.norm(v - cam.source_position, axis=1) / w
    screen = np.column_stack([xyw[:, 0], xyw[:, 1], dist])
    tri = screen[mesh.faces]
    normals = cam.handedness * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return ProjectedMesh(_frozen(screen), _frozen(normals), mesh.faces,
                         mesh.vertices, _frozen(w), _frozen(h), cam.handedness, mesh.label)


def sign_from_normals(normals) -> np.ndarray:
    """sign(N . (0, 0, 1)) per row, 0 when the unit normal is perpendicular within EPS_PERP."""
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    norm = np.linalg.norm(n, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dz = np.where(norm > 0, n[:, 2] / norm, 0.0)
    s = np.sign(dz).astype(np.int8)
    s[np.abs(dz) < EPS_PERP] = 0
    return s


def face_orientation_signs(proj: ProjectedMesh) -> np.ndarray:
    return sign_from_normals(proj.normals)


def face_orientation_sign(face: int, proj: ProjectedMesh) -> int:
    """+1 for a face the ray enters through, -1 for an exit face, 0 edge-on."""
    return int(sign_from_normals(proj.normals[face])[0])
