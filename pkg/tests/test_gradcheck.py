import numpy as np
import pytest

from meshdrr import gradcheck as gc
from meshdrr.pipeline import render_meshes, render_model
from meshdrr.primitives import icosphere
from meshdrr.shapemodel import PoseShapeParams, build_synthetic_model
from meshdrr.synthetic import default_materials, default_setup, default_spectrum


def test_compositor_stage():
    rng = np.random.default_rng(0)
    mats = default_materials()
    mats = type(mats)({**mats.entries, "organ": mats.entries["body"]})
    rep = gc.check_compositor(gc.random_stack((24, 20), rng), default_spectrum(), mats, rng)
    assert rep.passed and len(rep.rows) == 20
    assert rep.max_error < gc.TOLERANCES["compositor"]


def test_ngc_stage():
    rng = np.random.default_rng(1)
    setup = default_setup(width_px=48, height_px=40, pitch_mm=4.0)
    body = icosphere(40.0, 3, label="body")
    a = render_meshes([body], setup).image
    b = render_meshes([body.transformed(np.eye(3), (3.0, -2.0, 0.0))], setup).image
    rep = gc.check_ngc(a, b, rng)
    assert rep.passed, rep.table()


def test_raster_stage(cameras):
    rng = np.random.default_rng(2)
    rep = gc.check_raster(icosphere(45.0, 3, (0.2, 0.1, 1.0)), cameras[2], rng)
    assert rep.passed, rep.table()
    assert sum(r.status == "ok" for r in rep.rows) >= 10


def test_full_stage_and_skips():
    model = build_synthetic_model()
    setup = default_setup(width_px=64, height_px=64, pitch_mm=4.0)
    params = PoseShapeParams([0.2, -0.3, 0.1], [0.01, -0.02, 0.03], [1.0, -2.0, 0.5])
    target = render_model(model, PoseShapeParams(params.beta, params.rotation + 0.02,
                                                 params.translation + [2.0, -1.5, 1.0]), setup).image
    rep = gc.check_full_model(model, params, target, setup)
    assert rep.passed, rep.table()
    assert all(r.status == "ok" for r in rep.rows)
    # a 0.5 mm step moves silhouettes across pixel centres
    coarse = gc.check_full_model(model, params, target, setup, h=0.5, coords=[0, 1, 2])
    assert any(r.status == gc.SKIPPED for r in coarse.rows)
    assert coarse.passed
    assert gc.SKIPPED in coarse.table()


def test_report_table_marks_failures():
    rep = gc._compare("full", ["a", "b"], [1.0, 2.0], [1.0, 2.5], [False, False])
    assert not rep.passed
    assert rep.table().splitlines()[-1].startswith("full: FAIL")
    assert rep.max_error == pytest.approx(0.2)
