"""Scene configuration files (TOML) and their resolution into renderable objects.

A scene names either a list of meshes or a shape-model archive, plus camera,
spectrum and materials. Relative paths resolve against the config file's
directory. Omitted camera, spectrum or materials fall back to the synthetic
defaults, so a scene may be as small as one ``[[mesh]]`` table::

    seed = 0
    output = "out"

    [camera]
    matrix = "cam.txt"          # 3x4 projection matrix
    detector = "detector.toml"  # DetectorGeometry fields

    [spectrum]
    path = "spectrum.csv"       # energy_keV,weight

    [materials]
    body = "water.csv"          # energy_keV,mu_per_mm
    bones = 0.05                # or a constant in 1/mm

    [[mesh]]
    path = "body.obj"
    label = "body"
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .compositor import MaterialTable, Spectrum
from .errors import ConfigError
from .fileio import load_camera, load_mesh, read_table, read_toml
from .geometry import DetectorGeometry, ProjectionCamera
from .pipeline import RenderSetup
from .rasterizer import DEFAULT_K
from .shapemodel import PoseShapeParams, ShapeModel, load_model
from .synthetic import default_camera, default_materials, default_spectrum


@dataclass
class MeshEntry:
    path: Path
    label: str


@dataclass
class SceneConfig:
    meshes: List[MeshEntry] = field(default_factory=list)
    model: Optional[Path] = None
    params: Optional[dict] = None
    camera: dict = field(default_factory=dict)
    spectrum: dict = field(default_factory=dict)
    materials: dict = field(default_factory=dict)
    output: Path = Path("out")
    seed: int = 0
    K: int = DEFAULT_K
    optimizer: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    # -- loading ----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "SceneConfig":
        base = Path(base_dir)

        def rel(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        known = {"mesh", "model", "params", "camera", "spectrum", "materials", "output",
                 "seed", "K", "optimizer"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        try:
            meshes = [MeshEntry(rel(m["path"]), str(m.get("label", "body")))
                      for m in d.get("mesh", [])]
        except (KeyError, TypeError):
            raise ConfigError("each [[mesh]] entry needs a 'path'") from None
        if meshes and "model" in d:
            raise ConfigError("a scene holds either meshes or a model archive, not both")
        materials = {}
        for label, v in d.get("materials", {}).items():
            materials[label] = float(v) if isinstance(v, (int, float)) else rel(v)
        camera = dict(d.get("camera", {}))
        for key in ("matrix", "detector"):
            if isinstance(camera.get(key), str):
                camera[key] = rel(camera[key])
        spectrum = dict(d.get("spectrum", {}))
        if "path" in spectrum:
            spectrum["path"] = rel(spectrum["path"])
        try:
            seed = int(d.get("seed", 0))
            K = int(d.get("K", DEFAULT_K))
        except (TypeError, ValueError):
            raise ConfigError("seed and K must be integers") from None
        return cls(meshes=meshes, model=rel(d["model"]) if "model" in d else None,
                   params=d.get("params"), camera=camera, spectrum=spectrum,
                   materials=materials, output=rel(d.get("output", "out")), seed=seed, K=K,
                   optimizer=dict(d.get("optimizer", {})), base_dir=base, raw=d)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"scene file not found: {path}")
        cfg = cls.from_dict(read_toml(path), base_dir=path.parent)
        cfg.validate()
        return cfg

    def referenced_paths(self) -> List[Path]:
        paths = [m.path for m in self.meshes]
        if self.model is not None:
            paths.append(self.model)
        paths += [v for v in self.materials.values() if isinstance(v, Path)]
        paths += [self.camera[k] for k in ("matrix", "detector") if isinstance(self.camera.get(k), Path)]
        if "path" in self.spectrum:
            paths.append(self.spectrum["path"])
        return paths

    def validate(self):
        missing = [str(p) for p in self.referenced_paths() if not p.exists()]
        if missing:
            raise ConfigError(f"missing scene files: {', '.join(missing)}")
        if ("matrix" in self.camera) != ("detector" in self.camera):
            raise ConfigError("camera needs both 'matrix' and 'detector'")
        return self

    # -- resolution -------------------------------------------------------

    def build_camera(self) -> ProjectionCamera:
        c = self.camera
        if "matrix" in c:
            return load_camera(c["matrix"], c["detector"], name=c.get("name"))
        if "source" in c:
            if "detector_geometry" not in c:
                raise ConfigError("inline camera needs 'source' and a [camera.detector_geometry] table")
            det = DetectorGeometry.from_dict(c["detector_geometry"])
            return ProjectionCamera.from_geometry(c["source"], det, name=c.get("name", "camera"))
        kw = {k: c[k] for k in ("width_px", "height_px", "pitch_mm", "source_to_iso",
                                "source_to_detector", "name") if k in c}
        return default_camera(**kw)

    def build_spectrum(self) -> Spectrum:
        s = self.spectrum
        if "path" in s:
            e, w = read_table(s["path"])
            return Spectrum(e, w, name=s.get("name", Path(s["path"]).stem))
        if "energy_kev" in s:
            return Spectrum.monoenergetic(float(s["energy_kev"]))
        return default_spectrum()

    def build_materials(self) -> MaterialTable:
        # listed materials override the defaults one by one
        entries = dict(default_materials().entries)
        for label, v in self.materials.items():
            entries[label] = ([1.0], [v]) if isinstance(v, float) else read_table(v)
        return MaterialTable(entries)

    def build_setup(self, threads=None) -> RenderSetup:
        return RenderSetup(self.build_camera(), self.build_spectrum(), self.build_materials(),
                           K=self.K, threads=threads)

    def load_meshes(self):
        return [load_mesh(m.path, label=m.label) for m in self.meshes]

    def load_model(self) -> ShapeModel:
        if self.model is None:
            raise ConfigError("scene has no model archive")
        return load_model(self.model)

    def model_params(self, model: ShapeModel) -> PoseShapeParams:
        if self.params is None:
            return PoseShapeParams.rest(model.n_basis)
        return PoseShapeParams.from_dict(self.params, n_basis=model.n_basis)

    # -- provenance -------------------------------------------------------

    def config_hash(self) -> str:
        """SHA-256 over the config table and the bytes of every referenced file."""
        h = hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode())
        for p in self.referenced_paths():
            h.update(str(p.name).encode())
            if p.is_dir():
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        h.update(f.relative_to(p).as_posix().encode())
                        h.update(f.read_bytes())
            elif p.is_file():
                h.update(p.read_bytes())
        return h.hexdigest()
