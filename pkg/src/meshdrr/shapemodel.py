"""Linear statistical shape model with a rigid pose.

A model instance is ``v(beta, theta) = R(theta) (mean + sum_k beta_k basis_k) + t``
with ``R`` built from XYZ Euler angles, ``R = Rz(c) @ Ry(b) @ Rx(a)``, about
the model-frame origin.
"""
from __future__ import annotations

import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import tomli
import tomli_w

from . import primitives
from .errors import ConfigError, MeshError
from .fileio import obj_text, parse_obj
from .geometry import TriangleMesh

log = logging.getLogger(__name__)

BETA_MAX = 3.0


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def euler_matrix(angles) -> np.ndarray:
    a, b, c = angles
    return _rz(c) @ _ry(b) @ _rx(a)


def euler_derivatives(angles):
    """dR/da, dR/db, dR/dc."""
    a, b, c = angles
    return (_rz(c) @ _ry(b) @ _drx(a),
            _rz(c) @ _dry(b) @ _rx(a),
            _drz(c) @ _ry(b) @ _rx(a))


def rotation_angle(R) -> float:
    """Rotation angle (rad) of a rotation matrix."""
    return float(np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)))


@dataclass
class PoseShapeParams:
    """Shape coefficients (training standard deviations) plus a rigid pose.

    Vector layout for optimisation is ``[tx, ty, tz, rx, ry, rz, beta...]``.
    """

    beta: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3).copy()
        self.translation = np.asarray(self.translation, dtype=float).reshape(3).copy()

    @classmethod
    def rest(cls, n_basis, translation=(0.0, 0.0, 0.0)):
        return cls(np.zeros(n_basis), np.zeros(3), translation)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation, self.beta])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[6:], x[3:6], x[:3])

    def copy(self):
        return PoseShapeParams(self.beta, self.rotation, self.translation)

    def to_dict(self):
        return {"beta": self.beta.tolist(), "rotation_rad": self.rotation.tolist(),
                "translation_mm": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d, n_basis=None):
        if "rotation_deg" in d:
            rot = np.radians(d["rotation_deg"])
        else:
            rot = d.get("rotation_rad", [0.0, 0.0, 0.0])
        beta = d.get("beta", [0.0] * (n_basis or 0))
        if n_basis is not None and len(beta) != n_basis:
            raise ConfigError(f"expected {n_basis} shape coefficients, got {len(beta)}")
        return cls(beta, rot, d.get("translation_mm", d.get("translation", [0.0, 0.0, 0.0])))


@dataclass(frozen=True, eq=False)
class ShapeModel:
    mean_vertices: np.ndarray
    basis: np.ndarray                 # (N_b, N_v, 3), mm per unit beta
    faces: np.ndarray
    vertex_labels: np.ndarray         # (N_v,) partition label per vertex
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    variances: Optional[np.ndarray] = None

    def __post_init__(self):
        mean = np.asarray(self.mean_vertices, dtype=float)
        basis = np.asarray(self.basis, dtype=float).reshape(-1, len(mean), 3)
        faces = np.asarray(self.faces, dtype=np.int64)
        labels = np.asarray(self.vertex_labels).astype(str)
        TriangleMesh(mean, faces)  # index validation
        if labels.shape != (len(mean),):
            raise MeshError("need exactly one partition label per vertex")
        lf = labels[faces]
        mixed = (lf[:, 0] != lf[:, 1]) | (lf[:, 1] != lf[:, 2])
        if mixed.any():
            raise MeshError(f"faces {np.flatnonzero(mixed)[:5].tolist()} span two partitions")
        flat = basis.reshape(len(basis), -1)
        norms = np.linalg.norm(flat, axis=1)
        if np.any(norms == 0):
            raise MeshError("zero basis component")
        gram = flat @ flat.T / np.outer(norms, norms)
        off = np.abs(gram - np.diag(np.diag(gram))).max() if len(basis) > 1 else 0.0
        if off > 1e-6:
            raise MeshError(f"basis components not orthogonal (max |cos| = {off:.2e})")
        lm = np.asarray(self.landmarks, dtype=np.int64).reshape(-1)
        if lm.size and (lm.min() < 0 or lm.max() >= len(mean)):
            raise MeshError("landmark index out of range")
        var = (np.ones(len(basis)) if self.variances is None
               else np.asarray(self.variances, dtype=float).reshape(len(basis)))
        for name, val in (("mean_vertices", mean), ("basis", basis), ("faces", faces),
                          ("vertex_labels", labels), ("landmarks", lm), ("variances", var)):
            val = np.array(val, copy=True)
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_vertices(self):
        return len(self.mean_vertices)

    @property
    def n_basis(self):
        return len(self.basis)

    @property
    def partition_labels(self) -> List[str]:
        """Partition names in order of first appearance among the faces."""
        seen = []
        for lab in self.vertex_labels[self.faces[:, 0]]:
            if lab not in seen:
                seen.append(str(lab))
        return seen

    def partition(self, label):
        """Faces of one partition reindexed to its own vertices, plus the vertex index map."""
        fmask = self.vertex_labels[self.faces[:, 0]] == label
        faces = self.faces[fmask]
        used = np.unique(faces)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return remap[faces], used

    def shaped_vertices(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return self.mean_vertices + np.tensordot(beta, self.basis, axes=1)

    def mesh(self, vertices=None, label="") -> TriangleMesh:
        return TriangleMesh(self.mean_vertices if vertices is None else vertices, self.faces, label)


def check_bounds(params: PoseShapeParams, beta_max=BETA_MAX):
    over = np.abs(params.beta) > beta_max
    if over.any():
        raise ValueError(f"shape coefficients {np.flatnonzero(over).tolist()} exceed +/-{beta_max}")


def clamp_beta(params: PoseShapeParams, beta_max=BETA_MAX) -> PoseShapeParams:
    return PoseShapeParams(np.clip(params.beta, -beta_max, beta_max), params.rotation,
                           params.translation)


def posed_vertices(model: ShapeModel, params: PoseShapeParams) -> np.ndarray:
    R = euler_matrix(params.rotation)
    return model.shaped_vertices(params.beta) @ R.T + params.translation


def instantiate(model: ShapeModel, params: PoseShapeParams,
                beta_max=BETA_MAX) -> Dict[str, TriangleMesh]:
    """One mesh per partition label, vertices reindexed per partition."""
    check_bounds(params, beta_max)
    v = posed_vertices(model, params)
    out = {}
    for label in model.partition_labels:
        faces, used = model.partition(label)
        out[label] = TriangleMesh(v[used], faces, label)
    return out


def params_jacobian_transpose(model: ShapeModel, params: PoseShapeParams, vertex_grads) -> np.ndarray:
    """Pull dC/d(vertex) back to the parameter vector ``[t, angles, beta]``."""
    g = np.asarray(vertex_grads, dtype=float).reshape(model.n_vertices, 3)
    R = euler_matrix(params.rotation)
    shaped = model.shaped_vertices(params.beta)
    d_t = g.sum(axis=0)
    gs = g.T @ shaped  # sum_v g_v s_v^T, so sum_v <g_v, dR s_v> = sum(dR * gs)
    d_rot = np.array([np.sum(dR * gs) for dR in euler_derivatives(params.rotation)])
    # <g_v, R phi_kv> = <R^T g_v, phi_kv>
    gr = g @ R
    d_beta = np.tensordot(model.basis, gr, axes=([1, 2], [0, 1]))
    return np.concatenate([d_t, d_rot, d_beta])


# -- synthetic generator ------------------------------------------------------

@dataclass
class BoneSpec:
    semi_axes: Sequence[float]
    center: Sequence[float] = (0.0, 0.0, 0.0)


@dataclass
class ModeSpec:
    """A global displacement field, evaluated at the mean vertices.

    kinds: ``scale`` (uniform, amplitude = fractional size change per unit),
    ``stretch_x|y|z`` (fractional along one axis), ``bend`` (mm lift of z at
    x = +/- body semi-axis, quadratic in x), ``bumps`` (mm, seeded smooth
    random field).
    """

    kind: str
    amplitude: float


@dataclass
class SyntheticModelConfig:
    body_semi_axes: Sequence[float] = (45.0, 30.0, 25.0)
    body_level: int = 3
    # bones at different depths so out-of-plane rotations change the image
    bones: List[BoneSpec] = field(default_factory=lambda: [
        BoneSpec((14.0, 7.0, 6.0), (14.0, 6.0, 13.0)),
        BoneSpec((9.0, 11.0, 6.0), (-18.0, -5.0, -12.0)),
        BoneSpec((6.0, 6.0, 6.0), (0.0, 14.0, 0.0)),
    ])
    bone_level: int = 2
    modes: List[ModeSpec] = field(default_factory=lambda: [
        ModeSpec("stretch_x", 0.03), ModeSpec("bend", 2.0), ModeSpec("bumps", 2.0),
    ])
    n_landmarks: int = 8
    seed: int = 7

    @classmethod
    def from_dict(cls, d):
        try:
            bones = [BoneSpec(b["semi_axes"], b.get("center", (0.0, 0.0, 0.0)))
                     for b in d.get("bones", [])] if "bones" in d else None
            modes = [ModeSpec(m["kind"], float(m["amplitude"]))
                     for m in d["modes"]] if "modes" in d else None
            kw = {k: d[k] for k in ("body_semi_axes", "body_level", "bone_level",
                                    "n_landmarks", "seed") if k in d}
        except (KeyError, TypeError) as e:
            raise ConfigError(f"invalid generator config: {e}") from None
        cfg = cls(**kw)
        if bones is not None:
            cfg.bones = bones
        if modes is not None:
            cfg.modes = modes
        return cfg

    def to_dict(self):
        return {
            "body_semi_axes": list(map(float, self.body_semi_axes)),
            "body_level": self.body_level,
            "bone_level": self.bone_level,
            "n_landmarks": self.n_landmarks,
            "seed": self.seed,
            "bones": [{"semi_axes": list(map(float, b.semi_axes)),
                       "center": list(map(float, b.center))} for b in self.bones],
            "modes": [{"kind": m.kind, "amplitude": m.amplitude} for m in self.modes],
        }


_AXIS = {"x": 0, "y": 1, "z": 2}


def _mode_field(spec: ModeSpec, pts, semi_axes, rng):
    kind, amp = spec.kind, spec.amplitude
    if kind == "scale":
        return amp * pts
    if kind.startswith("stretch_") and kind[-1] in _AXIS:
        out = np.zeros_like(pts)
        ax = _AXIS[kind[-1]]
        out[:, ax] = amp * pts[:, ax]
        return out
    if kind == "bend":
        out = np.zeros_like(pts)
        out[:, 2] = amp * (pts[:, 0] / semi_axes[0]) ** 2
        return out
    if kind == "bumps":
        out = np.zeros_like(pts)
        scale = np.asarray(semi_axes, float)
        for _ in range(4):
            c = rng.uniform(-1, 1, 3) * scale
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            width = 0.6 * scale.mean()
            out += amp * d * np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * width ** 2))[:, None]
        return out
    raise ConfigError(f"unknown mode kind {kind!r}")


def build_synthetic_model(config: SyntheticModelConfig = None) -> ShapeModel:
    """Ellipsoid 'body' with nested ellipsoid 'bones', plus orthogonalised global modes.

    Every mode is a smooth displacement field applied to both partitions, so
    small coefficients keep the bones inside the body. Stored values are
    pre-rounded to what :func:`save_model` writes, so a saved and reloaded
    model is identical to the in-memory one.
    """
    config = config or SyntheticModelConfig()
    if not config.modes:
        raise ConfigError("need at least one deformation mode")
    if not config.bones:
        raise ConfigError("need at least one bone ellipsoid")
    rng = np.random.default_rng(config.seed)
    body = primitives.ellipsoid(config.body_semi_axes, config.body_level, label="body")
    bones = [primitives.ellipsoid(b.semi_axes, config.bone_level, b.center, label="bones")
             for b in config.bones]
    merged = primitives.merge([body] + bones)
    labels = np.array(["body"] * body.n_vertices
                      + ["bones"] * (merged.n_vertices - body.n_vertices))
    pts = merged.vertices
    fields = [_mode_field(m, pts, config.body_semi_axes, rng).ravel() for m in config.modes]
    basis = []
    for f in fields:
        v = f.copy()
        for b in basis:
            v = v - (v @ b) / (b @ b) * b
        if np.linalg.norm(v) < 1e-9 * max(np.linalg.norm(f), 1e-300):
            raise ConfigError("deformation modes are linearly dependent")
        basis.append(v)
    basis = np.array(basis).reshape(len(basis), -1, 3).astype(np.float32).astype(np.float64)
    n_lm = min(config.n_landmarks, body.n_vertices)
    landmarks = np.sort(rng.choice(body.n_vertices, size=n_lm, replace=False))
    return ShapeModel(pts, basis, merged.faces, labels, landmarks, np.ones(len(basis)))


# -- archive i/o --------------------------------------------------------------

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _model_files(model: ShapeModel) -> Dict[str, bytes]:
    files = {}
    files["mean.obj"] = obj_text(model.mesh()).encode()
    for k, comp in enumerate(model.basis):
        files[f"basis_{k}.f32"] = comp.astype("<f4").tobytes()
    files["partition.csv"] = ("vertex,label\n" + "".join(
        f"{i},{lab}\n" for i, lab in enumerate(model.vertex_labels))).encode()
    files["landmarks.csv"] = ("landmark,vertex\n" + "".join(
        f"{i},{v}\n" for i, v in enumerate(model.landmarks.tolist()))).encode()
    files["meta.toml"] = tomli_w.dumps({
        "n_vertices": model.n_vertices, "n_basis": model.n_basis,
        "variances": model.variances.tolist()}).encode()
    return files


def save_model(model: ShapeModel, path):
    """Write a directory, or a zip archive when ``path`` ends in ``.zip``."""
    path = Path(path)
    files = _model_files(model)
    if path.suffix == ".zip":
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            for name in sorted(files):
                info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, files[name])
    else:
        path.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            (path / name).write_bytes(data)
    return path


def load_model(path) -> ShapeModel:
    path = Path(path)
    if path.is_dir():
        def read(name):
            p = path / name
            if not p.exists():
                raise MeshError(f"model archive {path} is missing {name}")
            return p.read_bytes()
    elif zipfile.is_zipfile(path):
        zf = zipfile.ZipFile(path)

        def read(name):
            try:
                return zf.read(name)
            except KeyError:
                raise MeshError(f"model archive {path} is missing {name}") from None
    else:
        raise MeshError(f"{path} is neither a model directory nor a zip archive")
    meta = tomli.loads(read("meta.toml").decode())
    n_v, n_b = int(meta["n_vertices"]), int(meta["n_basis"])
    mean = parse_obj(read("mean.obj").decode(), source=f"{path}/mean.obj")
    if mean.n_vertices != n_v:
        raise MeshError(f"mean.obj has {mean.n_vertices} vertices, meta says {n_v}")
    basis = np.stack([np.frombuffer(read(f"basis_{k}.f32"), dtype="<f4").reshape(n_v, 3)
                      for k in range(n_b)]).astype(np.float64)
    labels = np.empty(n_v, dtype=object)
    for line in read("partition.csv").decode().splitlines()[1:]:
        i, lab = line.split(",")
        labels[int(i)] = lab.strip()
    lm = [int(line.split(",")[1]) for line in read("landmarks.csv").decode().splitlines()[1:]
          if line.strip()]
    return ShapeModel(mean.vertices, basis, mean.faces, labels.astype(str), np.array(lm, dtype=np.int64),
                      np.asarray(meta.get("variances", np.ones(n_b)), dtype=float))
