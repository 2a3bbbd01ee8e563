import itertools

import numpy as np
import pytest
from oracles import central_difference

from meshdrr.errors import ConfigError, MeshError
from meshdrr.metrics import hausdorff_distance
from meshdrr.pipeline import render_model
from meshdrr.primitives import icosphere
from meshdrr.shapemodel import (BETA_MAX, ModeSpec, PoseShapeParams, ShapeModel,
                                SyntheticModelConfig, build_synthetic_model, clamp_beta,
                                euler_matrix, instantiate, load_model, params_jacobian_transpose,
                                posed_vertices, save_model)
from meshdrr.synthetic import default_setup


@pytest.fixture(scope="module")
def model():
    return build_synthetic_model()


def small_model(n_modes=3, seed=0):
    """About 100 vertices, orthogonal random basis."""
    sphere = icosphere(20.0, 2)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(sphere.n_vertices * 3, n_modes)))
    basis = (5.0 * q.T).reshape(n_modes, -1, 3)
    return ShapeModel(sphere.vertices, basis, sphere.faces, ["body"] * sphere.n_vertices)


def random_params(rng, n_basis):
    return PoseShapeParams(rng.uniform(-2, 2, n_basis), rng.uniform(-0.5, 0.5, 3),
                           rng.uniform(-20, 20, 3))


# -- instantiate --------------------------------------------------------------

def test_rest_instance_is_mean(model):
    meshes = instantiate(model, PoseShapeParams.rest(model.n_basis))
    assert set(meshes) == {"body", "bones"}
    for label, m in meshes.items():
        faces, used = model.partition(label)
        np.testing.assert_array_equal(m.vertices, model.mean_vertices[used])
        np.testing.assert_array_equal(m.faces, faces)


def test_translation(model):
    v = posed_vertices(model, PoseShapeParams.rest(model.n_basis, (10.0, 0.0, 0.0)))
    np.testing.assert_array_equal(v, model.mean_vertices + [10.0, 0.0, 0.0])


def test_first_component(model):
    beta = np.zeros(model.n_basis)
    beta[0] = 1.0
    v = posed_vertices(model, PoseShapeParams(beta))
    np.testing.assert_array_equal(v[0] - model.mean_vertices[0], model.basis[0][0])


def test_out_of_bounds_beta(model):
    p = PoseShapeParams(np.full(model.n_basis, 3.5))
    with pytest.raises(ValueError):
        instantiate(model, p)
    assert np.all(np.abs(clamp_beta(p).beta) == BETA_MAX)


def test_linear_in_beta(model):
    rng = np.random.default_rng(1)
    b1, b2 = rng.uniform(-1, 1, (2, model.n_basis))
    v = lambda b: posed_vertices(model, PoseShapeParams(b))  # noqa: E731
    resid = v(b1 + b2) - v(b1) - v(b2) + v(np.zeros(model.n_basis))
    assert np.abs(resid).max() < 1e-12


def test_rigid_invariance(model):
    rng = np.random.default_rng(2)
    p = random_params(rng, model.n_basis)
    posed = instantiate(model, p)
    shaped = instantiate(model, PoseShapeParams(p.beta))
    R = euler_matrix(p.rotation)
    for label in posed:
        moved = shaped[label].transformed(R, p.translation)
        np.testing.assert_allclose(moved.vertices, posed[label].vertices, atol=1e-12)
        assert hausdorff_distance(moved, posed[label]) < 1e-9


def test_euler_order():
    a, b, c = 0.1, -0.2, 0.3
    Rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    Ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    Rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    np.testing.assert_allclose(euler_matrix([a, b, c]), Rz @ Ry @ Rx, atol=1e-15)


# -- jacobian -----------------------------------------------------------------

def test_zero_vertex_gradient(model):
    g = params_jacobian_transpose(model, PoseShapeParams.rest(model.n_basis),
                                  np.zeros((model.n_vertices, 3)))
    assert np.all(g == 0)


def test_uniform_vertex_gradient(model):
    rng = np.random.default_rng(3)
    g = np.tile([1.0, 0.0, 0.0], (model.n_vertices, 1))
    out = params_jacobian_transpose(model, random_params(rng, model.n_basis), g)
    np.testing.assert_array_equal(out[:3], [model.n_vertices, 0, 0])


def test_rotation_gradient_fd():
    m = small_model()
    rng = np.random.default_rng(4)
    p = random_params(rng, m.n_basis)
    g = rng.normal(size=(m.n_vertices, 3))
    x0 = p.as_vector()

    def f(x):
        return float(np.sum(g * posed_vertices(m, PoseShapeParams.from_vector(x))))

    analytic = params_jacobian_transpose(m, p, g)
    for i in range(3, 6):
        def fi(a, i=i):
            x = x0.copy()
            x[i] = a[0]
            return f(x)
        numeric = central_difference(fi, [x0[i]], 1e-5)[0]
        assert analytic[i] == pytest.approx(numeric, rel=1e-4)


def test_linear_coordinates_fd():
    m = small_model(n_modes=4, seed=9)
    rng = np.random.default_rng(5)
    for _ in range(5):
        p = random_params(rng, m.n_basis)
        g = rng.normal(size=(m.n_vertices, 3))
        analytic = params_jacobian_transpose(m, p, g)
        numeric = central_difference(
            lambda x: float(np.sum(g * posed_vertices(m, PoseShapeParams.from_vector(x)))),
            p.as_vector(), 1e-3)
        lin = np.r_[0:3, 6:6 + m.n_basis]
        np.testing.assert_allclose(analytic[lin], numeric[lin], rtol=1e-6,
                                   atol=1e-6 * np.abs(analytic[lin]).max())


# -- validation ---------------------------------------------------------------

def test_basis_must_be_orthogonal():
    sphere = icosphere(10.0, 1)
    b = np.ones((2, sphere.n_vertices, 3))
    with pytest.raises(MeshError):
        ShapeModel(sphere.vertices, b, sphere.faces, ["a"] * sphere.n_vertices)


def test_face_partition_must_be_uniform():
    sphere = icosphere(10.0, 1)
    labels = ["a"] * sphere.n_vertices
    labels[0] = "b"
    with pytest.raises(MeshError):
        ShapeModel(sphere.vertices, np.ones((1, sphere.n_vertices, 3)), sphere.faces, labels)


def test_params_dict_round_trip():
    p = PoseShapeParams([0.5, -1.0], [0.1, 0.2, 0.3], [1, 2, 3])
    q = PoseShapeParams.from_dict(p.to_dict(), 2)
    np.testing.assert_array_equal(q.as_vector(), p.as_vector())
    d = PoseShapeParams.from_dict({"rotation_deg": [90, 0, 0]}, 2)
    assert d.rotation[0] == pytest.approx(np.pi / 2) and np.all(d.beta == 0)
    with pytest.raises(ConfigError):
        PoseShapeParams.from_dict({"beta": [1.0]}, 2)


# -- synthetic generator ------------------------------------------------------

def test_generator_is_deterministic(tmp_path):
    cfg = SyntheticModelConfig(modes=[ModeSpec("scale", 0.05), ModeSpec("bend", 2.0)], seed=7)
    a = save_model(build_synthetic_model(cfg), tmp_path / "a.zip")
    b = save_model(build_synthetic_model(cfg), tmp_path / "b.zip")
    assert a.read_bytes() == b.read_bytes()
    save_model(build_synthetic_model(cfg), tmp_path / "d1")
    save_model(build_synthetic_model(cfg), tmp_path / "d2")
    for f in sorted((tmp_path / "d1").iterdir()):
        assert f.read_bytes() == (tmp_path / "d2" / f.name).read_bytes()


def test_scale_mode():
    s = 0.05
    m = build_synthetic_model(SyntheticModelConfig(modes=[ModeSpec("scale", s), ModeSpec("bend", 2.0)]))
    v = posed_vertices(m, PoseShapeParams([1.0, 0.0]))
    # the stored basis is rounded to float32
    np.testing.assert_allclose(v, (1 + s) * m.mean_vertices, rtol=0, atol=1e-5)


def test_dependent_modes_rejected():
    with pytest.raises(ConfigError):
        build_synthetic_model(SyntheticModelConfig(modes=[ModeSpec("scale", 0.1), ModeSpec("scale", 0.2)]))
    with pytest.raises(ConfigError):
        build_synthetic_model(SyntheticModelConfig(modes=[ModeSpec("twist", 1.0)]))


def test_config_round_trip():
    cfg = SyntheticModelConfig()
    again = SyntheticModelConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        SyntheticModelConfig.from_dict({"modes": [{"kind": "scale"}]})


def test_bones_stay_inside_body_over_beta_grid(model):
    setup = default_setup(width_px=64, height_px=64, pitch_mm=3.0)
    for beta in itertools.product([-BETA_MAX, 0.0, BETA_MAX], repeat=model.n_basis):
        # render_model runs the containment subtraction and raises on violations
        rend = render_model(model, PoseShapeParams(beta), setup)
        assert np.all(np.isfinite(rend.image.values))
        assert not any(c.any() for c in rend.stack.clamped.values())


@pytest.mark.parametrize("suffix", ["", ".zip"])
def test_archive_round_trip(model, tmp_path, suffix):
    path = save_model(model, tmp_path / f"m{suffix}")
    back = load_model(path)
    np.testing.assert_array_equal(back.mean_vertices, model.mean_vertices)
    np.testing.assert_array_equal(back.basis, model.basis)
    np.testing.assert_array_equal(back.faces, model.faces)
    np.testing.assert_array_equal(back.vertex_labels, model.vertex_labels)
    np.testing.assert_array_equal(back.landmarks, model.landmarks)


def test_incomplete_archive(model, tmp_path):
    path = save_model(model, tmp_path / "m")
    (path / "basis_1.f32").unlink()
    with pytest.raises(MeshError):
        load_model(path)
