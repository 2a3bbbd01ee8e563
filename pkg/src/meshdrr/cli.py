"""Command-line entry points: render, register, gradcheck, synth-model, metrics.

Exit codes: 0 ok, 1 usage or dimension mismatch, 2 scene/config/containment
error, 3 registration stopped at the iteration cap, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, DimensionError, MeshDrrError, NgcUndefinedError,
                     NonFiniteLossError)
from .fileio import load_mesh, read_pfm, read_toml, write_pfm, write_pgm, write_toml
from .parallel import THREADS_ENV

log = logging.getLogger("meshdrr")

EXIT_OK, EXIT_USAGE, EXIT_SCENE, EXIT_NO_CONVERGENCE, EXIT_NUMERIC = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------

def _versions():
    import matplotlib
    import numba
    import scipy
    return {"meshdrr": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "matplotlib": matplotlib.__version__}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command, args: dict, config_hash, seed, threads, outputs):
    """Everything needed to rerun: inputs hash, seed, versions and output digests."""
    manifest = {
        "command": command,
        "arguments": args,
        "config_hash": config_hash,
        "seed": seed,
        "threads": threads,
        "versions": _versions(),
        "outputs": {Path(p).name: _sha256(p) for p in sorted(outputs, key=lambda p: Path(p).name)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _threads(args):
    if args.threads is not None:
        return args.threads
    from .parallel import default_threads
    return default_threads()


def read_params(path, n_basis=None):
    """Pose/shape parameters from TOML or JSON (translation_mm, rotation_deg|rotation_rad, beta)."""
    from .shapemodel import PoseShapeParams
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"parameter file not found: {path}")
    if path.suffix == ".json":
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    else:
        d = read_toml(path)
    return PoseShapeParams.from_dict(d, n_basis=n_basis)


def parse_perturb(text):
    """``"t=10,r=5"`` -> (10.0, 5.0): max translation (mm) and rotation (deg) per axis."""
    vals = {"t": 0.0, "r": 0.0}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, value = part.partition("=")
        if key.strip() not in vals or not value:
            raise argparse.ArgumentTypeError(f"bad perturbation {part!r}, expected t=<mm>,r=<deg>")
        try:
            vals[key.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number in {part!r}") from None
        if vals[key.strip()] < 0:
            raise argparse.ArgumentTypeError("perturbation ranges must be non-negative")
    return vals["t"], vals["r"]


def _load_scene(path):
    from .scene import SceneConfig
    return SceneConfig.load(path)


def _out_dir(args, scene):
    out = Path(args.out) if args.out else scene.output
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_meshes(scene):
    """Meshes to render: the mesh list, or the model instantiated at the scene parameters."""
    if scene.model is None:
        return scene.load_meshes()
    from .shapemodel import instantiate
    model = scene.load_model()
    return list(instantiate(model, scene.model_params(model)).values())


# -- render -------------------------------------------------------------------

def cmd_render(args):
    from .pipeline import render_meshes
    from .plotting import plot_render, save_preview
    scene = _load_scene(args.scene)
    threads = _threads(args)
    setup = scene.build_setup(threads)
    meshes = _scene_meshes(scene)
    rend = render_meshes(meshes, setup)
    out = _out_dir(args, scene)
    files = [write_pfm(out / "image.pfm", rend.image.values)]
    files.append(save_preview(out / "image.png", rend.image))
    maps = {}
    for label, objs in sorted(rend.objects.items()):
        for i, obj in enumerate(objs):
            name = label if len(objs) == 1 else f"{label}_{i}"
            files.append(write_pfm(out / f"distance_{name}.pfm", obj.dmap.values))
            files.append(write_pgm(out / f"valid_{name}.pgm", obj.dmap.valid))
            if obj.dmap.repaired.any():
                log.warning("%s: %d pixels repaired from neighbours", name, int(obj.dmap.repaired.sum()))
            maps[name] = obj.dmap.values
    if not args.no_figures:
        files.append(plot_render(out / "render.png", rend.image, maps))
    write_manifest(out, "render", {"scene": str(args.scene)}, scene.config_hash(), scene.seed,
                   threads, files)
    print(f"rendered {len(meshes)} mesh(es) to {out}")
    return EXIT_OK


# -- register -----------------------------------------------------------------

def _trajectory_csv(path, trajectory, n_basis):
    cols = ["iteration", "loss", "tx_mm", "ty_mm", "tz_mm", "rx_rad", "ry_rad", "rz_rad"]
    cols += [f"beta{k}" for k in range(n_basis)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in trajectory:
            w.writerow([row["iteration"], repr(row["loss"])] + [repr(float(v)) for v in row["params"]])
    return path


def cmd_register(args):
    from .pipeline import render_model
    from .plotting import plot_loss, plot_registration
    from .registration import OptimizerConfig, perturb, register
    from .similarity import NgcLoss

    scene = _load_scene(args.scene)
    if scene.model is None:
        raise ConfigError("register needs a scene with a model archive")
    threads = _threads(args)
    setup = scene.build_setup(threads)
    model = scene.load_model()
    seed = scene.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)

    reference = None
    if args.target_params:
        reference = read_params(args.target_params, model.n_basis)
        target = render_model(model, reference, setup).image.values
    else:
        target = read_pfm(args.target)
        if args.reference_params:
            reference = read_params(args.reference_params, model.n_basis)
    if target.shape != setup.camera.detector.shape:
        raise DimensionError(f"target image is {target.shape[1]}x{target.shape[0]} px, "
                             f"camera detector is {setup.camera.detector.width_px}x"
                             f"{setup.camera.detector.height_px} px")

    if args.init:
        init = read_params(args.init, model.n_basis)
    elif reference is not None and args.perturb is not None:
        init = reference.copy()
    else:
        init = scene.model_params(model)
    if args.perturb is not None:
        init = perturb(init, rng, *args.perturb)

    opt = dict(scene.optimizer)
    if args.max_iterations is not None:
        opt["max_iterations"] = args.max_iterations
    cfg = (OptimizerConfig.adaptive(**opt) if args.optimizer == "adaptive"
           else OptimizerConfig.from_dict(opt))

    out = _out_dir(args, scene)
    files = []

    def dump(it, value, params, image):
        files.append(write_pfm(out / f"iter_{it:04d}.pfm", image.values))

    run_args = {"scene": str(args.scene), "target": str(args.target or ""),
                "target_params": str(args.target_params or ""), "init": str(args.init or ""),
                "perturb": list(args.perturb) if args.perturb else None,
                "optimizer": cfg.to_dict()}
    try:
        report = register(model, target, setup, init, cfg, reference=reference,
                          callback=dump if args.dump_iterations else None)
    except NonFiniteLossError as e:
        files.append(_trajectory_csv(out / "trajectory.csv", e.trajectory, model.n_basis))
        (out / "failure.json").write_text(json.dumps(
            {"error": str(e), "trajectory": e.trajectory}, indent=2) + "\n")
        files.append(out / "failure.json")
        write_manifest(out, "register", run_args, scene.config_hash(), seed, threads, files)
        raise

    (out / "report.json").write_text(report.to_json(indent=2, sort_keys=True) + "\n")
    files.append(out / "report.json")
    files.append(_trajectory_csv(out / "trajectory.csv", report.trajectory, model.n_basis))
    with open(out / "report_table.csv", "w", newline="") as fh:
        row = report.table_row()
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow(["" if v is None else f"{v:.4f}" for v in row.values()])
    files.append(out / "report_table.csv")

    if not args.no_figures:
        from .shapemodel import PoseShapeParams
        initial = render_model(model, init, setup).image
        final = render_model(model, PoseShapeParams.from_dict(report.final_params), setup).image
        loss = NgcLoss()
        loss.forward(final, target)
        files.append(plot_registration(out / "registration.png", target, initial, final, loss.map()))
        files.append(plot_loss(out / "loss.png", [t["loss"] for t in report.trajectory]))
    write_manifest(out, "register", run_args, scene.config_hash(), seed, threads, files)

    print(f"loss {report.initial_loss:.6f} -> {report.final_loss:.6f} in {report.iterations} "
          f"iterations ({'converged' if report.converged else 'iteration cap'})")
    if report.final_hausdorff_mm is not None:
        print(f"hausdorff_mm,{report.initial_hausdorff_mm:.4f},{report.final_hausdorff_mm:.4f}")
    if report.final_landmark_mm is not None:
        print(f"landmark_mm,{report.initial_landmark_mm:.4f},{report.final_landmark_mm:.4f}")
    if report.low_visibility:
        print(f"warning: low visibility ({100 * report.initial_visibility:.0f}% of vertices in view)")
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args):
    from . import gradcheck as gc
    from .compositor import RESERVED
    from .pipeline import render_meshes, render_model
    from .shapemodel import PoseShapeParams

    scene = _load_scene(args.scene)
    threads = _threads(args)
    setup = scene.build_setup(threads)
    seed = scene.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    shift = np.array([2.0, -1.5, 1.0])
    step = {} if args.step is None else {"h": args.step}

    if args.stage == "compositor":
        organs = [k for k in setup.materials.entries if k not in RESERVED]
        stack = gc.random_stack(setup.camera.detector.shape, rng, organ_labels=organs)
        report = gc.check_compositor(stack, setup.spectrum, setup.materials, rng, n=args.n,
                                     **step)
    elif args.stage == "ngc":
        meshes = _scene_meshes(scene)
        a = render_meshes(meshes, setup).image
        b = render_meshes([m.transformed(np.eye(3), shift) for m in meshes], setup).image
        report = gc.check_ngc(a, b, rng, n=args.n, **step)
    elif args.stage == "raster":
        meshes = _scene_meshes(scene)
        if not meshes:
            raise ConfigError("raster gradcheck needs at least one mesh")
        report = gc.check_raster(meshes[0], setup.camera, rng, n=args.n, K=setup.K,
                                 threads=threads, **step)
    else:
        if scene.model is not None:
            model = scene.load_model()
            params = scene.model_params(model)
            tparams = PoseShapeParams(params.beta, params.rotation + np.radians([1.0, -1.0, 2.0]),
                                      params.translation + shift)
            target = render_model(model, tparams, setup).image
            report = gc.check_full_model(model, params, target, setup, **step)
        else:
            meshes = scene.load_meshes()
            target = render_meshes([m.transformed(np.eye(3), shift) for m in meshes], setup).image
            report = gc.check_full_meshes(meshes, target, setup, rng, n=args.n, **step)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_NUMERIC


# -- synth-model --------------------------------------------------------------

def cmd_synth_model(args):
    from .shapemodel import SyntheticModelConfig, build_synthetic_model, save_model
    cfg = SyntheticModelConfig.from_dict(read_toml(args.config)) if args.config else SyntheticModelConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    model = build_synthetic_model(cfg)
    out = Path(args.output)
    save_model(model, out)
    manifest_dir = out.parent if out.suffix == ".zip" else out
    if out.suffix == ".zip":
        files = [out]
    else:
        files = sorted(p for p in out.iterdir()
                       if p.is_file() and p.name not in ("manifest.json", "generator.toml"))
    gen = manifest_dir / (f"{out.stem}_generator.toml" if out.suffix == ".zip" else "generator.toml")
    write_toml(gen, cfg.to_dict())
    files.append(gen)
    cfg_hash = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()
    write_manifest(manifest_dir, "synth-model", {"output": out.name}, cfg_hash, cfg.seed, 1, files)
    print(f"model with {model.n_vertices} vertices and {model.n_basis} modes written to {out}")
    return EXIT_OK


# -- metrics ------------------------------------------------------------------

def cmd_metrics(args):
    from .metrics import hausdorff_distance, landmark_error, pose_errors
    from .shapemodel import load_model, posed_vertices
    rows = {}
    if args.model:
        model = load_model(args.model)
        a = read_params(args.a, model.n_basis)
        b = read_params(args.b, model.n_basis)
        rows["hausdorff_mm"] = hausdorff_distance(model.mesh(posed_vertices(model, a)),
                                                  model.mesh(posed_vertices(model, b)))
        if len(model.landmarks):
            rows["landmark_mm"] = landmark_error(model, a, posed_vertices(model, b)[model.landmarks])
        pe = pose_errors(a, b)
        rows["translation_mm"] = pe["translation_mm"]
        rows["rotation_deg"] = pe["rotation_deg"]
    else:
        rows["hausdorff_mm"] = hausdorff_distance(load_mesh(args.a), load_mesh(args.b))
    print("metric,value")
    for k, v in rows.items():
        print(f"{k},{v:.6f}")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="meshdrr", description="Differentiable mesh X-ray rendering and 2D/3D registration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", parents=[common], help="render a scene to a transmission image")
    r.add_argument("scene", help="scene TOML file")
    r.add_argument("--out", help="output directory (default: scene 'output')")
    r.add_argument("--no-figures", action="store_true", help="skip the matplotlib panel")
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("register", parents=[common], help="fit model pose and shape to a target image")
    g.add_argument("scene", help="scene TOML file naming a model archive")
    tgt = g.add_mutually_exclusive_group(required=True)
    tgt.add_argument("--target", help="target transmission image (PFM)")
    tgt.add_argument("--target-params", help="render the target from these parameters (TOML/JSON)")
    g.add_argument("--reference-params", help="ground truth for metrics when --target is an image")
    g.add_argument("--init", help="initial parameters (default: scene [params], or the target "
                                  "parameters when --perturb is given)")
    g.add_argument("--perturb", type=parse_perturb, metavar="t=MM,r=DEG",
                   help="uniform random offset per axis, e.g. 't=10,r=5'")
    g.add_argument("--seed", type=int, help="perturbation seed (default: scene seed)")
    g.add_argument("--optimizer", choices=["adaptive", "normalized"], default="adaptive",
                   help="adaptive: per-coordinate Adam steps with decay (default); "
                        "normalized: constant per-group normalized steps")
    g.add_argument("--max-iterations", type=int)
    g.add_argument("--dump-iterations", action="store_true", help="write iter_NNNN.pfm per iteration")
    g.add_argument("--out", help="output directory (default: scene 'output')")
    g.add_argument("--no-figures", action="store_true", help="skip overlay and loss figures")
    g.set_defaults(func=cmd_register)

    c = sub.add_parser("gradcheck", parents=[common], help="compare analytic and finite-difference gradients")
    c.add_argument("scene", help="scene TOML file")
    c.add_argument("--stage", choices=["raster", "compositor", "ngc", "full"], required=True)
    c.add_argument("--n", type=int, default=20, help="coordinates to check (default 20)")
    c.add_argument("--seed", type=int, help="sampling seed (default: scene seed)")
    c.add_argument("--step", type=float,
                   help="finite-difference step (default: per stage); large steps in the "
                        "raster and full stages cross coverage changes and are skipped")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth-model", parents=[common], help="write the synthetic ellipsoid shape model")
    s.add_argument("output", help="archive directory, or a path ending in .zip")
    s.add_argument("--config", help="generator TOML (bones, modes, seed)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_model)

    m = sub.add_parser("metrics", parents=[common], help="Hausdorff, landmark and pose errors")
    m.add_argument("a", help="mesh file, or parameter file with --model")
    m.add_argument("b", help="reference mesh file, or reference parameter file with --model")
    m.add_argument("--model", help="model archive; a and b are then parameter files")
    m.add_argument("--json", help="also write the values to this JSON file")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("meshdrr: error: --threads must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        os.environ[THREADS_ENV] = str(args.threads)
    try:
        return args.func(args)
    except DimensionError as e:
        print(f"meshdrr: dimension error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"meshdrr: numeric failure: {e} (trajectory written)", file=sys.stderr)
        return EXIT_NUMERIC
    except NgcUndefinedError as e:
        print(f"meshdrr: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MeshDrrError, OSError) as e:
        print(f"meshdrr: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_SCENE


if __name__ == "__main__":
    sys.exit(main())
