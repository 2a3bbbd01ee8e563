"""Readers and writers for meshes, float images, masks and tables."""
from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import CameraError, ConfigError, MeshError
from .geometry import DetectorGeometry, ProjectionCamera, TriangleMesh

log = logging.getLogger(__name__)


# -- meshes -------------------------------------------------------------------

def parse_obj(text, label="", source="<obj>") -> TriangleMesh:
    """Build a mesh from OBJ ``v``/``f`` records; other records are ignored."""
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"only triangles are supported, got {len(idx)}-gon")
                # OBJ is 1-based; negative indices count back from the last vertex
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError as e:
            raise MeshError(f"{source}:{lineno}: {e}") from None
    if not verts or not faces:
        raise MeshError(f"{source}: empty mesh")
    return TriangleMesh(np.array(verts), np.array(faces), label)


def read_obj(path, label="") -> TriangleMesh:
    return parse_obj(Path(path).read_text(), label, str(path))


def obj_text(mesh: TriangleMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a} {b} {c}" for a, b, c in (mesh.faces + 1).tolist()]
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriangleMesh, path):
    Path(path).write_text(obj_text(mesh))


def read_stl(path, label="") -> TriangleMesh:
    """Binary STL with exact (bitwise) vertex welding."""
    data = Path(path).read_bytes()
    if len(data) < 84:
        raise MeshError(f"{path}: truncated STL header")
    (n,) = struct.unpack_from("<I", data, 80)
    if n == 0:
        raise MeshError(f"{path}: empty mesh")
    if len(data) < 84 + 50 * n:
        raise MeshError(f"{path}: expected {n} triangles, file too short")
    rec = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    tris = np.frombuffer(data, dtype=rec, count=n, offset=84)["v"].reshape(-1, 3)
    keys = np.ascontiguousarray(tris).view(np.dtype((np.void, 12))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    # renumber unique vertices by first appearance so output order is stable
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertices = tris[first[order]].astype(np.float64)
    faces = rank[inverse.ravel()].reshape(-1, 3)
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    if degenerate.any():
        log.warning("%s: dropping %d degenerate triangles after welding", path, degenerate.sum())
        faces = faces[~degenerate]
    return TriangleMesh(vertices, faces, label)


def write_stl(mesh: TriangleMesh, path):
    rec = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    out = np.zeros(mesh.n_faces, dtype=rec)
    out["normal"] = mesh.face_normals()
    out["v"] = mesh.vertices[mesh.faces]
    with open(path, "wb") as fh:
        fh.write(b"meshdrr binary stl".ljust(80, b" "))
        fh.write(struct.pack("<I", mesh.n_faces))
        fh.write(out.tobytes())


def load_mesh(path, label="") -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return read_obj(path, label)
    if suffix == ".stl":
        return read_stl(path, label)
    raise MeshError(f"{path}: unsupported mesh format {suffix!r} (expected .obj or .stl)")


# -- images -------------------------------------------------------------------

def write_pfm(path, image):
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    a = np.asarray(image, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("PFM writer expects a 2D image")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())
    return Path(path)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        a = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    a = a.reshape(h, w, channels)[::-1]
    return (a[..., 0] if channels == 1 else a).astype(np.float32)


def write_pgm(path, mask):
    m = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(m.tobytes())
    return Path(path)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        a = np.frombuffer(fh.read(), dtype=np.uint8 if maxval < 256 else ">u2", count=w * h)
    return a.reshape(h, w) > 0


def write_npy(path, image):
    np.save(path, np.asarray(image, dtype=np.float32))


# -- tables and configs -------------------------------------------------------

def read_table(path):
    """Two-column CSV (energy_keV, value) with an optional header row."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except (ValueError, IndexError):
                if rows or lineno > 1:
                    raise ConfigError(f"{path}:{lineno}: expected two numeric columns") from None
    if not rows:
        raise ConfigError(f"{path}: empty table")
    a = np.array(rows)
    return a[:, 0], a[:, 1]


def write_table(path, energies, values, header=("energy_keV", "value")):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for e, v in zip(energies, values):
            fh.write(f"{float(e)!r},{float(v)!r}\n")


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def write_toml(path, data: dict):
    with open(path, "wb") as fh:
        tomli_w.dump(data, fh)


def read_projection_matrix(path) -> np.ndarray:
    try:
        P = np.loadtxt(path, dtype=float, ndmin=2)
    except ValueError as e:
        raise CameraError(f"{path}: {e}") from None
    if P.shape != (3, 4):
        raise CameraError(f"{path}: projection matrix must be 3 rows x 4 columns, got {P.shape}")
    return P


def write_projection_matrix(path, P):
    np.savetxt(path, np.asarray(P, float), fmt="%.17g")


def load_camera(matrix_path, detector_path, name=None) -> ProjectionCamera:
    det = DetectorGeometry.from_dict(read_toml(detector_path))
    return ProjectionCamera(read_projection_matrix(matrix_path), det,
                            name=name or Path(matrix_path).stem)


def save_camera(cam: ProjectionCamera, matrix_path, detector_path):
    write_projection_matrix(matrix_path, cam.matrix)
    write_toml(detector_path, cam.detector.to_dict())
