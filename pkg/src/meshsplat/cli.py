"""Command-line interface: ``meshsplat {train,render,animate,export,gradcheck,synth}``.

Exit codes: 0 success, 2 bad arguments, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryError, MeshSplatError, NumericalError, TopologyMismatch

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("meshsplat")


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_BAD_ARGS, f"{self.prog}: error: {message}\n")


def _set_threads(n):
    if n:
        import numba

        if n < 1:
            raise _ArgumentError("--threads must be positive")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _load_camera(path) -> "Camera":
    from .gaussians import Camera

    p = Path(path)
    if not p.exists():
        raise DataError(f"missing camera file {p}")
    try:
        return Camera.from_dict(json.loads(p.read_text()))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{p}: bad camera ({exc})") from exc


def _background(text):
    vals = [float(x) for x in text.split(",")]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background must be one value or three comma-separated values")
    return np.array(vals)


def cmd_train(args) -> int:
    from . import io, trainer

    try:
        cfg = trainer.TrainConfig.from_toml(args.config) if args.config else trainer.TrainConfig()
    except FileNotFoundError as exc:
        raise DataError(f"missing config file {args.config}") from exc
    except ValueError as exc:
        raise _ArgumentError(f"config {args.config}: {exc}") from exc
    overrides = {k: v for k, v in {
        "total_iters": args.iters, "seed": args.seed, "threads": args.threads,
        "walking": args.walking, "init_count": args.init_count,
    }.items() if v is not None}
    for key, val in overrides.items():
        setattr(cfg, key, val)
    try:
        cfg.validate()
    except ValueError as exc:
        raise _ArgumentError(str(exc)) from exc
    canonical, frames = io.load_dataset(args.manifest)
    loaded = trainer.frames_from_dataset(io.load_frames(canonical, frames))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(it, model, state):
        if it % 100 == 0:
            log.info("iter %d  gaussians %d", it, len(model))

    result = trainer.train(canonical, loaded, cfg, metrics_path=out / "metrics.csv", callback=progress)
    io.export_model(result.model, out / "model")
    (out / "run.json").write_text(json.dumps({
        "config": cfg.__dict__,
        "final_psnr_val": result.final_psnr,
        "n_gaussians": len(result.model),
        "seconds": result.seconds,
        "note": "loss_ssim is (1 - SSIM), used in place of a perceptual loss at weight lambda_l",
    }, indent=1))
    print(f"trained {cfg.total_iters} iterations: {len(result.model)} gaussians, validation PSNR {result.final_psnr:.2f} dB")
    return EXIT_OK


def _posed_render(model, posed, camera, background):
    from .deformation import build_deformation_field
    from .model import render_model

    field = build_deformation_field(model.mesh, posed)
    out, _ = render_model(model, posed, field, camera, background)
    return out.image


def cmd_render(args) -> int:
    from . import geometry, io

    model = io.import_model(args.model)
    camera = _load_camera(args.camera)
    posed = model.mesh
    if args.mesh:
        verts, faces = geometry.read_obj_arrays(args.mesh)
        if not np.array_equal(faces, model.mesh.faces):
            raise TopologyMismatch(f"{args.mesh}: face buffer differs from the model's canonical mesh")
        posed = model.mesh.with_vertices(verts)
    image = _posed_render(model, posed, camera, args.background)
    io.write_png(args.out, image)
    if args.raw:
        io.write_raw(args.raw, image)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_animate(args) -> int:
    from . import io

    model = io.import_model(args.model)
    camera = _load_camera(args.camera)
    meshes = io.load_mesh_sequence(args.meshes, model.mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, posed in enumerate(meshes):
        io.write_png(out / f"frame_{i:04d}.png", _posed_render(model, posed, camera, args.background))
    print(f"wrote {len(meshes)} frames to {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    from . import geometry, io

    model = io.import_model(args.model)
    posed = None
    if args.mesh:
        verts, faces = geometry.read_obj_arrays(args.mesh)
        if not np.array_equal(faces, model.mesh.faces):
            raise TopologyMismatch(f"{args.mesh}: face buffer differs from the model's canonical mesh")
        posed = model.mesh.with_vertices(verts)
    io.export_posed_ply(model, args.out, posed)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.seed, args.scenes, args.gaussians, args.size)
    print(report.table())
    return EXIT_OK if report.ok else EXIT_NUMERICAL


def cmd_synth(args) -> int:
    from . import io

    spec = io.SyntheticSpec(mesh=args.mesh, level=args.level, n_gaussians=args.gaussians, n_frames=args.frames,
                            width=args.size, height=args.size, deformation=args.deformation)
    manifest = io.generate_synthetic(args.seed, spec, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshsplat", description="Mesh-embedded Gaussian splatting.")
    p.add_argument("--threads", type=int, default=None, help="cap rasterizer threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model to a dataset manifest")
    t.add_argument("manifest")
    t.add_argument("--config", help="TOML file with TrainConfig fields")
    t.add_argument("--out", default="run")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--init-count", type=int)
    t.add_argument("--walking", choices=["walk", "clip"])
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render an exported model to PNG")
    r.add_argument("model", help="directory written by train/export")
    r.add_argument("camera", help="camera JSON")
    r.add_argument("--mesh", help="posed OBJ (default: canonical)")
    r.add_argument("--out", default="render.png")
    r.add_argument("--raw", help="also write a raw float image")
    r.add_argument("--background", type=_background, default=np.zeros(3))
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("animate", help="render a model driven by a mesh sequence")
    a.add_argument("model")
    a.add_argument("meshes", help="directory with manifest.json listing OBJ frames")
    a.add_argument("camera")
    a.add_argument("--out", default="frames")
    a.add_argument("--background", type=_background, default=np.zeros(3))
    a.set_defaults(func=cmd_animate)

    e = sub.add_parser("export", help="write a splat PLY, optionally posed")
    e.add_argument("model")
    e.add_argument("--mesh", help="posed OBJ")
    e.add_argument("--out", default="gaussians.ply")
    e.set_defaults(func=cmd_export)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=20)
    g.add_argument("--gaussians", type=int, default=10)
    g.add_argument("--size", type=int, default=32)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mesh", choices=["icosphere", "plane", "cylinder"], default="icosphere")
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--gaussians", type=int, default=500)
    s.add_argument("--frames", type=int, default=25)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--deformation", choices=["twist", "identity"], default="twist")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except _ArgumentError as exc:
        print(f"meshsplat: error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except NumericalError as exc:
        print(f"meshsplat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, GeometryError, TopologyMismatch, MeshSplatError, OSError) as exc:
        print(f"meshsplat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
