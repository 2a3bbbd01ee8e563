"""Surface distances, landmark errors and field-of-view coverage."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshError
from .geometry import ProjectionCamera, TriangleMesh
from .shapemodel import PoseShapeParams, ShapeModel, euler_matrix, posed_vertices, rotation_angle

SAMPLE_AREA_MM2 = 4.0


def surface_samples(mesh: TriangleMesh, area_per_sample=SAMPLE_AREA_MM2) -> np.ndarray:
    """Vertices plus sub-triangle centroids of a regular barycentric lattice per face.

    A face of area A is split into m*m congruent sub-triangles with
    m = ceil(sqrt(A / area_per_sample)), giving at least one sample per
    ``area_per_sample``.
    """
    tri = mesh.vertices[mesh.faces]
    areas = mesh.face_areas()
    m = np.maximum(1, np.ceil(np.sqrt(areas / area_per_sample))).astype(int)
    out = [mesh.vertices]
    for k in np.unique(m):
        sel = tri[m == k]
        bary = []
        for i in range(k):
            for j in range(k - i):
                # upright sub-triangle centroid
                bary.append(((i + 1 / 3) / k, (j + 1 / 3) / k))
                if i + j < k - 1:
                    bary.append(((i + 2 / 3) / k, (j + 2 / 3) / k))
        b = np.array(bary)
        w = np.column_stack([1 - b.sum(1), b])
        out.append(np.einsum("sk,fkd->fsd", w, sel).reshape(-1, 3))
    return np.vstack(out)


def hausdorff_distance(mesh_a: TriangleMesh, mesh_b: TriangleMesh,
                       area_per_sample=SAMPLE_AREA_MM2) -> float:
    """Symmetric Hausdorff distance (mm) between surface point samples."""
    if mesh_a is None or mesh_b is None or mesh_a.n_faces == 0 or mesh_b.n_faces == 0:
        raise MeshError("Hausdorff distance needs two non-empty meshes")
    pa = surface_samples(mesh_a, area_per_sample)
    pb = surface_samples(mesh_b, area_per_sample)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def landmark_error(model: ShapeModel, params: PoseShapeParams, reference_landmarks) -> float:
    ref = np.asarray(reference_landmarks, dtype=float).reshape(-1, 3)
    if len(ref) != len(model.landmarks):
        raise ValueError(f"model has {len(model.landmarks)} landmarks, reference has {len(ref)}")
    if len(ref) == 0:
        raise ValueError("model defines no landmarks")
    pts = posed_vertices(model, params)[model.landmarks]
    return float(np.linalg.norm(pts - ref, axis=1).mean())


def visibility_fraction(model: ShapeModel, params: PoseShapeParams, cam: ProjectionCamera,
                        label=None) -> float:
    """Fraction of (partition) vertices projecting inside the detector."""
    v = posed_vertices(model, params)
    if label is not None:
        v = v[model.vertex_labels == label]
    xyw = cam.project_points(v)
    det = cam.detector
    inside = ((xyw[:, 2] > 0) & (xyw[:, 0] >= -0.5) & (xyw[:, 0] <= det.width_px - 0.5)
              & (xyw[:, 1] >= -0.5) & (xyw[:, 1] <= det.height_px - 0.5))
    return float(inside.mean())


def pose_errors(params: PoseShapeParams, reference: PoseShapeParams, cam: ProjectionCamera = None):
    """Translation error (mm), rotation error (deg), and the depth/in-plane split of the former."""
    dt = params.translation - reference.translation
    R = euler_matrix(params.rotation) @ euler_matrix(reference.rotation).T
    out = {"translation_mm": float(np.linalg.norm(dt)),
           "rotation_deg": float(np.degrees(rotation_angle(R)))}
    if cam is not None:
        depth = float(dt @ cam.toward_detector)
        out["depth_mm"] = abs(depth)
        out["in_plane_mm"] = float(np.linalg.norm(dt - depth * cam.toward_detector))
    return out
