"""Finite-difference checks of the analytic gradients, one stage at a time.

Each check reduces its stage to a scalar with fixed random weights, perturbs
a sample of input coordinates by +/- h and compares the central difference
with the analytic gradient. Rasterized stages are only piecewise smooth: if a
perturbation changes which faces cover which pixels, the coordinate is
reported as skipped rather than compared.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from .compositor import SceneStack, backward_beer_lambert, beer_lambert
from .geometry import ProjectionCamera, TriangleMesh, project_mesh
from .pipeline import RenderSetup, backward_meshes, backward_model, render_meshes, render_model
from .rasterizer import DEFAULT_K, backward_distance, rasterize_lbuffer, resolve_distance
from .shapemodel import PoseShapeParams, ShapeModel
from .similarity import EPS_VAR, NgcLoss

log = logging.getLogger(__name__)

TOLERANCES = {"compositor": 1e-5, "ngc": 1e-5, "raster": 1e-3, "full": 1e-2}
STAGES = tuple(TOLERANCES)
SKIPPED = "skipped (discontinuity)"


@dataclass
class GradRow:
    name: str
    analytic: float
    numeric: float
    rel_error: float
    status: str   # "ok", "FAIL" or SKIPPED


@dataclass
class GradReport:
    stage: str
    tolerance: float
    rows: List[GradRow]

    @property
    def passed(self) -> bool:
        return all(r.status != "FAIL" for r in self.rows)

    @property
    def max_error(self) -> float:
        errs = [r.rel_error for r in self.rows if r.status != SKIPPED]
        return max(errs) if errs else 0.0

    def table(self) -> str:
        lines = [f"{'coordinate':<28}{'analytic':>16}{'numeric':>16}{'rel.err':>11}  status"]
        for r in self.rows:
            err = "-" if r.status == SKIPPED else f"{r.rel_error:.2e}"
            lines.append(f"{r.name:<28}{r.analytic:>16.8e}{r.numeric:>16.8e}{err:>11}  {r.status}")
        n_skip = sum(r.status == SKIPPED for r in self.rows)
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{self.stage}: {verdict}, max rel. error {self.max_error:.2e} "
                     f"(tolerance {self.tolerance:g}), {n_skip} skipped")
        return "\n".join(lines)


def relative_error(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


def _compare(stage, names, analytic, numeric, skipped, floor_frac=0.1) -> GradReport:
    """Errors are relative to each entry, floored at ``floor_frac * tol * max|analytic|``."""
    tol = TOLERANCES[stage]
    analytic = np.asarray(analytic, float)
    live = analytic[~np.asarray(skipped, bool)] if len(analytic) else analytic
    scale = float(np.abs(live).max()) if live.size else 0.0
    floor = max(floor_frac * tol * scale, 1e-300)
    rows = []
    for name, a, n, skip in zip(names, analytic, numeric, skipped):
        if skip:
            rows.append(GradRow(name, float(a), float(n), float("nan"), SKIPPED))
            continue
        e = relative_error(a, n, floor)
        rows.append(GradRow(name, float(a), float(n), e, "ok" if e <= tol else "FAIL"))
    return GradReport(stage, tol, rows)


# -- compositor ---------------------------------------------------------------

def random_stack(shape, rng, organ_labels=("organ",)) -> SceneStack:
    """Raw maps with strict containment margins (no clamping anywhere)."""
    air = rng.uniform(900.0, 1100.0, shape)
    # bones and organs on disjoint pixel sets
    in_bone = rng.random(shape) < 0.5
    bones = np.where(in_bone, rng.uniform(1.0, 30.0, shape), 0.0)
    organs = {k: np.where(in_bone, 0.0, rng.uniform(1.0, 20.0, shape)) for k in organ_labels}
    inner = bones + sum(organs.values(), np.zeros(shape))
    body = inner + rng.uniform(5.0, 150.0, shape)
    return SceneStack(air, body, bones, organs)


def check_compositor(stack: SceneStack, spectrum, materials, rng, n=20, h=1e-3) -> GradReport:
    w = rng.normal(size=stack.shape)
    raw = stack.raw_maps()
    grads = backward_beer_lambert(w, stack, spectrum, materials)
    labels = sorted(raw)
    names, an, nu = [], [], []
    for _ in range(n):
        label = labels[rng.integers(len(labels))]
        r, c = rng.integers(stack.shape[0]), rng.integers(stack.shape[1])

        def image(v, label=label, r=r, c=c):
            maps = {k: m.copy() for k, m in raw.items()}
            maps[label][r, c] = v
            s = SceneStack(maps["air"], maps.get("body"), maps.get("bones"),
                           {k: maps[k] for k in stack.organs})
            return beer_lambert(s, spectrum, materials).values

        # difference the images before reducing, so the sum adds no roundoff
        x = raw[label][r, c]
        diff = image(x + h) - image(x - h)
        names.append(f"{label}[{r},{c}]")
        an.append(grads[label][r, c])
        nu.append(float(np.sum(w * diff)) / (2 * h))
    return _compare("compositor", names, an, nu, [False] * n)


# -- NGC ----------------------------------------------------------------------

def _ngc_extended(a, b):
    """NGC in extended precision, for finite differences over large images."""
    ld = np.longdouble
    vals = []
    for ca, cb in zip(_gradients_ld(a.astype(ld)), _gradients_ld(b.astype(ld))):
        za = ca - ca.mean()
        zb = cb - cb.mean()
        saa, sbb = np.sum(za * za), np.sum(zb * zb)
        n = za.size
        if saa / n <= EPS_VAR or sbb / n <= EPS_VAR:
            continue
        vals.append(np.sum(za * zb) / np.sqrt(saa * sbb))
    return sum(vals) / len(vals)


def _gradients_ld(img):
    p = np.pad(img, 1, mode="edge")
    return (p[1:-1, 2:] - p[1:-1, :-2]) / 2, (p[2:, 1:-1] - p[:-2, 1:-1]) / 2


def check_ngc(image_a, image_b, rng, n=20, h=None) -> GradReport:
    a = np.asarray(getattr(image_a, "values", image_a), float)
    b = np.asarray(getattr(image_b, "values", image_b), float)
    loss = NgcLoss()
    loss.forward(a, b)
    g = loss.backward()
    if h is None:
        h = 1e-4 * max(float(np.abs(a).max()), 1e-12)
    names, an, nu = [], [], []
    for _ in range(n):
        r, c = rng.integers(a.shape[0]), rng.integers(a.shape[1])

        def f(v, r=r, c=c):
            x = a.astype(np.longdouble)
            x[r, c] = v
            return _ngc_extended(x, b)

        x0 = np.longdouble(a[r, c])
        names.append(f"a[{r},{c}]")
        an.append(g[r, c])
        nu.append(float((f(x0 + h) - f(x0 - h)) / (2 * np.longdouble(h))))
    return _compare("ngc", names, an, nu, [False] * n)


# -- rasterizer ---------------------------------------------------------------

def _coverage(buffers):
    """Per-pixel face lists, enough to tell whether coverage changed."""
    return [(b.count.copy(), np.where(np.arange(b.K) < b.count[..., None], b.face, -1))
            for b in buffers]


def _same_coverage(c1, c2):
    return all(np.array_equal(a1, a2) and np.array_equal(f1, f2)
               for (a1, f1), (a2, f2) in zip(c1, c2))


def check_raster(mesh: TriangleMesh, cam: ProjectionCamera, rng, n=20, h=1e-4,
                 K=DEFAULT_K, threads=None) -> GradReport:
    """d(sum w * L)/d(vertex coordinate) for randomly chosen vertices that touch the image."""
    w = rng.normal(size=cam.detector.shape)

    def render(verts):
        m = mesh.with_vertices(verts)
        proj = project_mesh(m, cam)
        buf = rasterize_lbuffer(proj, cam, K, threads)
        return proj, buf, resolve_distance(buf, threads=threads)

    proj, buf, dmap = render(mesh.vertices)
    g = backward_distance(buf, dmap, w, proj, cam, threads).vertex_grad
    base = _coverage([buf])
    touching = np.unique(mesh.faces[np.unique(buf.face[buf.face >= 0])])
    pool = touching if len(touching) else np.arange(mesh.n_vertices)
    names, an, nu, skip = [], [], [], []
    for _ in range(n):
        vi, ax = int(pool[rng.integers(len(pool))]), int(rng.integers(3))
        vals, covs = [], []
        for s in (1.0, -1.0):
            v = mesh.vertices.copy()
            v[vi, ax] += s * h
            _, b, d = render(v)
            vals.append(float(np.sum(w * d.values)))
            covs.append(_coverage([b]))
        names.append(f"v{vi}.{'xyz'[ax]}")
        an.append(g[vi, ax])
        nu.append((vals[0] - vals[1]) / (2 * h))
        skip.append(not all(_same_coverage(base, c) for c in covs))
    return _compare("raster", names, an, nu, skip)


# -- full chain ---------------------------------------------------------------

def _buffers(rend):
    return [o.buffer for objs in rend.objects.values() for o in objs]


def check_full_model(model: ShapeModel, params: PoseShapeParams, target, setup: RenderSetup,
                     h=None, coords=None) -> GradReport:
    """d(-NGC)/d[t, angles, beta] through instantiate, rasterizer and compositor."""
    target = np.asarray(getattr(target, "values", target), float)
    x0 = params.as_vector()
    if h is None:
        h = np.concatenate([np.full(3, 1e-5), np.full(3, 1e-7), np.full(len(x0) - 6, 1e-5)])
    h = np.broadcast_to(np.asarray(h, float), x0.shape)
    loss = NgcLoss()
    rend = render_model(model, params, setup)
    loss.forward(rend.image, target)
    g = backward_model(model, rend, -loss.backward(), setup)
    base = _coverage(_buffers(rend))
    labels = ["tx", "ty", "tz", "rx", "ry", "rz"] + [f"beta{k}" for k in range(len(x0) - 6)]
    idx = range(len(x0)) if coords is None else coords
    names, an, nu, skip = [], [], [], []
    for i in idx:
        vals, same = [], True
        for s in (1.0, -1.0):
            x = x0.copy()
            x[i] += s * h[i]
            r = render_model(model, PoseShapeParams.from_vector(x), setup)
            vals.append(-NgcLoss().forward(r.image, target))
            same &= _same_coverage(base, _coverage(_buffers(r)))
        names.append(labels[i])
        an.append(g[i])
        nu.append((vals[0] - vals[1]) / (2 * h[i]))
        skip.append(not same)
    return _compare("full", names, an, nu, skip)


def check_full_meshes(meshes, target, setup: RenderSetup, rng, n=20, h=1e-5) -> GradReport:
    """d(-NGC)/d(vertex coordinate) for a labelled mesh scene."""
    target = np.asarray(getattr(target, "values", target), float)
    loss = NgcLoss()
    rend = render_meshes(meshes, setup)
    loss.forward(rend.image, target)
    per = backward_meshes(rend, -loss.backward(), setup)
    # same order as render_meshes groups them
    grads, owners = [], []
    for label, gl in per.items():
        for j, gm in enumerate(gl):
            grads.append(gm)
            owners.append(rend.objects[label][j].mesh)
    index = {id(m): k for k, m in enumerate(owners)}
    base = _coverage(_buffers(rend))
    names, an, nu, skip = [], [], [], []
    for _ in range(n):
        mi = int(rng.integers(len(meshes)))
        mesh = meshes[mi]
        vi, ax = int(rng.integers(mesh.n_vertices)), int(rng.integers(3))
        vals, same = [], True
        for s in (1.0, -1.0):
            v = mesh.vertices.copy()
            v[vi, ax] += s * h
            ms = list(meshes)
            ms[mi] = mesh.with_vertices(v)
            r = render_meshes(ms, setup)
            vals.append(-NgcLoss().forward(r.image, target))
            same &= _same_coverage(base, _coverage(_buffers(r)))
        names.append(f"{mesh.label or mi}:v{vi}.{'xyz'[ax]}")
        an.append(grads[index[id(mesh)]][vi, ax])
        nu.append((vals[0] - vals[1]) / (2 * h))
        skip.append(not same)
    return _compare("full", names, an, nu, skip)
