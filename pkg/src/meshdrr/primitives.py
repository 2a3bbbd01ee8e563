"""Closed test solids with outward (counter-clockwise) winding."""
from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), label="") -> TriangleMesh:
    sx, sy, sz = np.broadcast_to(np.asarray(size, float), (3,)) / 2
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # vertex index = 4*ix + 2*iy + iz
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ])
    return TriangleMesh(v + np.asarray(center, float), f, label)


def _icosahedron():
    t = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(v, f):
    v = list(map(tuple, v))
    cache = {}
    out = []

    def mid(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = (np.asarray(v[a]) + np.asarray(v[b])) / 2
            v.append(tuple(m / np.linalg.norm(m)))
            cache[key] = len(v) - 1
        return cache[key]

    for a, b, c in f.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(v), np.array(out)


def icosphere(radius=1.0, level=2, center=(0.0, 0.0, 0.0), label="") -> TriangleMesh:
    """Subdivided icosahedron with vertices on the sphere. Level L has 20*4**L faces."""
    v, f = _icosahedron()
    for _ in range(level):
        v, f = _subdivide(v, f)
    return TriangleMesh(v * radius + np.asarray(center, float), f, label)


def ellipsoid(semi_axes, level=3, center=(0.0, 0.0, 0.0), label="") -> TriangleMesh:
    unit = icosphere(1.0, level)
    return TriangleMesh(unit.vertices * np.asarray(semi_axes, float) + np.asarray(center, float),
                        unit.faces, label)


def torus(major=30.0, minor=10.0, n_major=32, n_minor=16, center=(0.0, 0.0, 0.0),
          label="") -> TriangleMesh:
    """Torus around the z axis."""
    a = 2 * np.pi * np.arange(n_major) / n_major
    b = 2 * np.pi * np.arange(n_minor) / n_minor
    A, B = np.meshgrid(a, b, indexing="ij")
    r = major + minor * np.cos(B)
    v = np.stack([r * np.cos(A), r * np.sin(A), minor * np.sin(B)], -1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            p = i * n_minor + j
            q = ((i + 1) % n_major) * n_minor + j
            p1 = i * n_minor + (j + 1) % n_minor
            q1 = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            faces += [[p, q, q1], [p, q1, p1]]
    return TriangleMesh(v + np.asarray(center, float), np.array(faces), label)


def merge(meshes, label="") -> TriangleMesh:
    """Concatenate meshes into one indexed mesh."""
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriangleMesh(np.vstack(verts), np.vstack(faces), label)
