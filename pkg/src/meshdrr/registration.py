"""Gradient-descent 2D/3D registration of a shape model to one projection image.

Each iteration renders the model, scores it with ``-NGC`` against the
target, back-propagates through compositor and rasterizer to the pose and
shape parameters and takes a normalized step per parameter group (or a
per-coordinate Adam step, see :meth:`OptimizerConfig.adaptive`).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import DimensionError, NonFiniteLossError
from .metrics import hausdorff_distance, landmark_error, pose_errors, visibility_fraction
from .pipeline import RenderSetup, backward_model, render_model
from .shapemodel import BETA_MAX, PoseShapeParams, ShapeModel, posed_vertices
from .similarity import NgcLoss

log = logging.getLogger(__name__)

LOW_VISIBILITY = 0.5


@dataclass
class OptimizerConfig:
    step_translation: float = 0.5   # mm per iteration
    step_rotation: float = 0.005    # rad per iteration
    step_shape: float = 0.05        # std units per iteration
    max_iterations: int = 500
    window: int = 20
    tolerance: float = 1e-5
    beta_max: float = BETA_MAX
    # multiply all steps by this factor whenever the loss fails to improve
    # for `patience` iterations; 1.0 keeps them constant
    step_decay: float = 1.0
    patience: int = 5
    min_step_scale: float = 0.05
    # "normalized": step along the group's unit gradient; "adam": per-coordinate
    # moment-normalized steps, with the group step sizes as learning rates
    method: str = "normalized"
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if min(self.step_translation, self.step_rotation, self.step_shape) <= 0:
            raise ValueError("step sizes must be positive")
        if self.max_iterations < 1:
            raise ValueError("iteration cap must be at least 1")
        if self.window < 1:
            raise ValueError("convergence window must be at least 1")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.method not in ("normalized", "adam"):
            raise ValueError(f"unknown optimizer method {self.method!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def adaptive(cls, **kw):
        """Per-coordinate Adam steps with step halving on stalls.

        Out-of-plane rotation and depth move the image far less than in-plane
        motion; group-normalized steps leave them nearly frozen.
        """
        base = dict(method="adam", step_decay=0.5, patience=10, min_step_scale=0.01)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


@dataclass
class RegistrationReport:
    initial_loss: float
    final_loss: float
    iterations: int
    converged: bool
    initial_params: dict
    final_params: dict
    trajectory: List[dict] = field(default_factory=list)
    initial_hausdorff_mm: Optional[float] = None
    final_hausdorff_mm: Optional[float] = None
    initial_landmark_mm: Optional[float] = None
    final_landmark_mm: Optional[float] = None
    initial_visibility: float = 1.0
    low_visibility: bool = False
    initial_pose_error: Optional[dict] = None
    final_pose_error: Optional[dict] = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def table_row(self):
        """Initial/final Hausdorff and landmark errors in mm."""
        return {
            "initial_hausdorff_mm": self.initial_hausdorff_mm,
            "initial_landmark_mm": self.initial_landmark_mm,
            "final_hausdorff_mm": self.final_hausdorff_mm,
            "final_landmark_mm": self.final_landmark_mm,
        }


def _groups(n_basis):
    return [(slice(0, 3), "step_translation"), (slice(3, 6), "step_rotation"),
            (slice(6, 6 + n_basis), "step_shape")]


def loss_and_gradient(model: ShapeModel, params: PoseShapeParams, target, setup: RenderSetup,
                      loss: Optional[NgcLoss] = None, beta_max=BETA_MAX):
    """(-NGC, d(-NGC)/d[t, angles, beta], rendering)."""
    loss = loss or NgcLoss()
    rend = render_model(model, params, setup, beta_max=beta_max)
    value = -loss.forward(rend.image, target)
    grad = backward_model(model, rend, -loss.backward(), setup)
    return value, grad, rend


def register(model: ShapeModel, target, setup: RenderSetup, init: PoseShapeParams,
             cfg: OptimizerConfig = None, reference: Optional[PoseShapeParams] = None,
             reference_mesh=None, reference_landmarks=None,
             callback: Optional[Callable] = None) -> RegistrationReport:
    """Fit pose and shape so the simulated image matches ``target`` under ``setup.camera``.

    ``callback(iteration, loss, params, image)`` is called once per evaluated iterate.

    ``reference`` (ground-truth parameters, synthetic targets only) provides
    the reference mesh and landmarks when they are not given explicitly.
    """
    cfg = cfg or OptimizerConfig()
    target = np.asarray(getattr(target, "values", target), dtype=float)
    if target.shape != setup.camera.detector.shape:
        raise DimensionError(
            f"target image {target.shape} does not match detector {setup.camera.detector.shape}")
    if reference is not None:
        if reference_mesh is None:
            reference_mesh = model.mesh(posed_vertices(model, reference))
        if reference_landmarks is None and len(model.landmarks):
            reference_landmarks = posed_vertices(model, reference)[model.landmarks]

    x = init.as_vector()
    x[6:] = np.clip(x[6:], -cfg.beta_max, cfg.beta_max)
    groups = _groups(model.n_basis)
    loss = NgcLoss()
    trajectory = []
    best_hist = []
    best_x, best_val = x.copy(), np.inf
    scale, stall = 1.0, 0
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    lr = np.zeros_like(x)
    for sl, key in groups:
        lr[sl] = getattr(cfg, key)
    converged = False
    for it in range(cfg.max_iterations + 1):
        params = PoseShapeParams.from_vector(x)
        rend = render_model(model, params, setup, beta_max=cfg.beta_max)
        value = -loss.forward(rend.image, target)
        trajectory.append({"iteration": it, "loss": float(value), "params": x.tolist()})
        if not np.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}", trajectory)
        if value < best_val:
            best_val, best_x = value, x.copy()
            stall = 0
        else:
            stall += 1
        best_hist.append(best_val)
        if callback is not None:
            callback(it, value, params, rend.image)
        if it >= cfg.window:
            prev = best_hist[it - cfg.window]
            if prev - best_val < cfg.tolerance * max(abs(best_val), 1e-12):
                converged = True
                break
        if it == cfg.max_iterations:
            break
        if cfg.step_decay < 1.0 and stall >= cfg.patience:
            scale = max(scale * cfg.step_decay, cfg.min_step_scale)
            stall = 0
        grad = backward_model(model, rend, -loss.backward(), setup)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(f"non-finite gradient at iteration {it}", trajectory)
        if cfg.method == "adam":
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad ** 2
            k = it + 1
            mhat = m1 / (1 - cfg.beta1 ** k)
            vhat = m2 / (1 - cfg.beta2 ** k)
            denom = np.sqrt(vhat)
            step = np.divide(mhat, denom, out=np.zeros_like(mhat), where=denom > 0)
            x -= scale * lr * step
        else:
            for sl, key in groups:
                norm = np.linalg.norm(grad[sl])
                if norm > 0:
                    x[sl] -= scale * getattr(cfg, key) * grad[sl] / norm
        x[6:] = np.clip(x[6:], -cfg.beta_max, cfg.beta_max)

    final = PoseShapeParams.from_vector(best_x)
    vis = visibility_fraction(model, init, setup.camera)
    report = RegistrationReport(
        initial_loss=trajectory[0]["loss"], final_loss=float(best_val),
        iterations=len(trajectory) - 1, converged=converged,
        initial_params=init.to_dict(), final_params=final.to_dict(),
        trajectory=trajectory, initial_visibility=vis, low_visibility=vis < LOW_VISIBILITY)
    if vis < LOW_VISIBILITY:
        log.warning("only %.0f%% of the model projects onto the detector", 100 * vis)
    if reference_mesh is not None:
        report.initial_hausdorff_mm = hausdorff_distance(model.mesh(posed_vertices(model, init)),
                                                         reference_mesh)
        report.final_hausdorff_mm = hausdorff_distance(model.mesh(posed_vertices(model, final)),
                                                       reference_mesh)
    if reference_landmarks is not None and len(model.landmarks):
        report.initial_landmark_mm = landmark_error(model, init, reference_landmarks)
        report.final_landmark_mm = landmark_error(model, final, reference_landmarks)
    if reference is not None:
        report.initial_pose_error = pose_errors(init, reference, setup.camera)
        report.final_pose_error = pose_errors(final, reference, setup.camera)
    return report


def perturb(params: PoseShapeParams, rng, max_translation=10.0, max_rotation_deg=5.0) -> PoseShapeParams:
    """Uniform offsets in [-t, t] mm and [-r, r] degrees on each axis; shape untouched."""
    dt = rng.uniform(-max_translation, max_translation, 3)
    dr = np.radians(rng.uniform(-max_rotation_deg, max_rotation_deg, 3))
    return PoseShapeParams(params.beta, params.rotation + dr, params.translation + dt)
