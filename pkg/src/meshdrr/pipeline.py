"""Mesh(es) -> distance maps -> transmission image, and the reverse-mode chain.

A partition or object label decides its role in the containment algebra:
``body`` and ``bones`` are reserved, anything else is treated as an organ.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .compositor import (MaterialTable, SceneStack, Spectrum, TransmissionImage,
                         air_distance_map, backward_beer_lambert, beer_lambert,
                         containment_subtract)
from .geometry import ProjectionCamera, TriangleMesh, project_mesh
from .rasterizer import (DEFAULT_K, DistanceMap, FragmentBuffer, backward_distance,
                         rasterize_lbuffer, resolve_distance)
from .shapemodel import PoseShapeParams, ShapeModel, instantiate, params_jacobian_transpose


@dataclass
class RenderSetup:
    camera: ProjectionCamera
    spectrum: Spectrum
    materials: MaterialTable
    K: int = DEFAULT_K
    threads: Optional[int] = None


@dataclass(eq=False)
class ObjectRender:
    mesh: TriangleMesh
    proj: object
    buffer: FragmentBuffer
    dmap: DistanceMap


@dataclass(eq=False)
class Rendering:
    image: TransmissionImage
    stack: SceneStack
    objects: Dict[str, list] = field(default_factory=dict)
    air: Optional[DistanceMap] = None


def _sum_maps(maps):
    out = maps[0].values.copy()
    for m in maps[1:]:
        out = out + m.values
    return out


def render_meshes(meshes, setup: RenderSetup) -> Rendering:
    """Render labelled meshes. ``meshes`` is a list of TriangleMesh; ``mesh.label`` sets the role.

    Several meshes sharing one label add their path lengths.
    """
    cam = setup.camera
    objects: Dict[str, list] = {}
    for mesh in meshes:
        proj = project_mesh(mesh, cam)
        buf = rasterize_lbuffer(proj, cam, setup.K, setup.threads)
        dmap = resolve_distance(buf, threads=setup.threads)
        objects.setdefault(mesh.label, []).append(ObjectRender(mesh, proj, buf, dmap))
    air = air_distance_map(cam)
    raw = {label: _sum_maps([o.dmap for o in objs]) for label, objs in objects.items()}
    organs = {k: v for k, v in raw.items() if k not in ("body", "bones", "air")}
    stack = containment_subtract(SceneStack(air.values, raw.get("body"), raw.get("bones"), organs))
    image = beer_lambert(stack, setup.spectrum, setup.materials, camera_id=cam.name)
    return Rendering(image, stack, objects, air)


def backward_meshes(rendering: Rendering, image_grad, setup: RenderSetup) -> Dict[str, list]:
    """dC/d(world vertices) for every rendered mesh, grouped like ``rendering.objects``."""
    raw_grads = backward_beer_lambert(image_grad, rendering.stack, setup.spectrum, setup.materials)
    out = {}
    for label, objs in rendering.objects.items():
        g = raw_grads[label]
        out[label] = [backward_distance(o.buffer, o.dmap, g, o.proj, setup.camera,
                                        setup.threads).vertex_grad for o in objs]
    return out


@dataclass(eq=False)
class ModelRendering(Rendering):
    params: Optional[PoseShapeParams] = None
    vertex_maps: Dict[str, np.ndarray] = field(default_factory=dict)


def render_model(model: ShapeModel, params: PoseShapeParams, setup: RenderSetup,
                 beta_max=None) -> ModelRendering:
    kw = {} if beta_max is None else {"beta_max": beta_max}
    parts = instantiate(model, params, **kw)
    r = render_meshes(list(parts.values()), setup)
    maps = {label: model.partition(label)[1] for label in parts}
    return ModelRendering(r.image, r.stack, r.objects, r.air, params, maps)


def backward_model(model: ShapeModel, rendering: ModelRendering, image_grad,
                   setup: RenderSetup) -> np.ndarray:
    """dC/d[t, angles, beta] given dC/d(image)."""
    per_mesh = backward_meshes(rendering, image_grad, setup)
    g = np.zeros((model.n_vertices, 3))
    for label, grads in per_mesh.items():
        np.add.at(g, rendering.vertex_maps[label], grads[0])
    return params_jacobian_transpose(model, rendering.params, g)
