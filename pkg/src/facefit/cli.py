"""Command-line entry point: synth, fit-coarse, fit-detail, render, eval, blend-uv.

Heavy modules are imported only after the thread count has been fixed, because
the rasterizer's thread pool reads it once at import.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import warnings
from pathlib import Path

__all__ = ["main", "build_parser"]

THREADS_ENV = "FACEFIT_THREADS"


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or all cores)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_fit(p: argparse.ArgumentParser, lr: float, decay_rate: float, decay_every: int = 5000) -> None:
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--decay-rate", type=float, default=decay_rate)
    p.add_argument("--decay-every", type=int, default=decay_every)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facefit", description="Analysis-by-synthesis face fitting on toy models.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="write a toy model and a synthetic target with known parameters")
    _add_common(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--grid", type=int, default=32, help="vertices per side of the toy model")
    p.add_argument("--coeff-scale", type=float, default=0.03)
    p.add_argument("--detail", action="store_true", help="add a bump displacement and render through UV space")
    p.add_argument("--res", type=int, default=64, help="UV resolution for --detail")

    p = sub.add_parser("fit-coarse", help="fit shape, pose, texture and lighting to an image")
    _add_common(p)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--landmarks", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--init", type=Path, help="FPJ1 file to start from")
    p.add_argument("--out", required=True, type=Path)
    _add_fit(p, 1e-2, 0.9)
    for flag, default in (("w1", 1.3), ("w2", 1.0), ("w3", 1.5), ("w4", 20.0), ("omega-s", 1.3), ("omega-e", 1.0),
                          ("omega-t", 1.3)):
        p.add_argument(f"--{flag}", type=float, default=default)

    p = sub.add_parser("fit-detail", help="fit a displacement map with the coarse fit frozen")
    _add_common(p)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--params", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--mode", choices=("view_z", "normal"), default="view_z")
    _add_fit(p, 2e-3, 0.98)
    for flag, default in (("omega-p", 1.0), ("omega-s-fine", 10.0), ("omega-d", 10.0), ("w-sn", 20.0),
                          ("w-sz", 10.0), ("w-dn", 0.5), ("w-dz", 0.01)):
        p.add_argument(f"--{flag}", type=float, default=default)

    p = sub.add_parser("render", help="render parameters to a PNG")
    _add_common(p)
    p.add_argument("--params", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"))

    p = sub.add_parser("eval", help="compare two meshes; prints one JSON line")
    _add_common(p)
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--model", type=Path, help="model whose landmark 30 locates the nose tip on --gt")
    p.add_argument("--crop-mm", type=float, default=None)
    p.add_argument("--icp", action="store_true", help="similarity-align pred to gt first")
    p.add_argument("--depth-res", type=int, default=128)
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--p2p", dest="metric", action="store_const", const="p2p")
    kind.add_argument("--p2plane", dest="metric", action="store_const", const="p2plane")
    kind.add_argument("--depth", dest="metric", action="store_const", const="depth")

    p = sub.add_parser("blend-uv", help="merge two partial UV maps")
    _add_common(p)
    p.add_argument("--a", required=True, type=Path)
    p.add_argument("--b", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--allow-view", action="store_true")
    return parser


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    if "numba" in sys.modules:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    else:
        os.environ["NUMBA_NUM_THREADS"] = str(n)


def _repro_line(args) -> str:
    import numpy
    import numba

    from . import __version__
    cfg = {k: str(v) for k, v in sorted(vars(args).items()) if k not in ("verbose", "threads")}
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]
    return (f"facefit {__version__} command={args.command} seed={args.seed} config={digest} "
            f"python={platform.python_version()} numpy={numpy.__version__} numba={numba.__version__}")


def _write_trace(path: Path, trace, best) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "best"])
        for i, (a, b) in enumerate(zip(trace, best)):
            w.writerow([i, repr(float(a)), repr(float(b))])


def _model_mesh(model, coeffs):
    from .facemodel import synthesize
    from .io import ObjMesh
    v, _ = synthesize(model, coeffs)
    return ObjMesh(v, model.triangles, model.uv_coords, model.triangles)


def _cmd_synth(args) -> int:
    import numpy as np

    from .facemodel import generate_toy_model, save_model
    from .io import write_image, write_landmarks, write_obj, write_params, write_uvmap
    from .synthetic import SyntheticConfig, detail_scene, random_scene, render_scene

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    model = generate_toy_model(args.seed, args.grid)
    scene = random_scene(model, args.seed, SyntheticConfig(args.size, args.size, args.coeff_scale))
    image, landmarks, _ = render_scene(model, scene, args.size, args.size)
    if args.detail:
        image, disp, _, _ = detail_scene(model, scene, args.res, args.size, args.size)
        write_uvmap(out / "displacement.uvm", disp)
    save_model(out / "model.fmm", model)
    write_params(out / "params.json", scene, model, (args.size, args.size))
    write_image(out / "image.png", np.clip(image, 0, 1))
    write_landmarks(out / "landmarks.txt", landmarks)
    write_obj(out / "mesh.obj", _model_mesh(model, scene.coeffs))
    return 0


def _fit_cfg(args):
    from .optim import FitConfig
    return FitConfig(learning_rate=args.lr, decay_every=args.decay_every, decay_rate=args.decay_rate,
                     max_steps=args.steps, seed=args.seed, convergence_tol=args.tol, patience=args.patience)


def _cmd_fit_coarse(args) -> int:
    import numpy as np

    from .facemodel import load_model
    from .io import read_image, read_landmarks, read_params, write_image, write_obj, write_params
    from .losses import CoarseWeights
    from .optim import fit_coarse
    from .raster import render_face

    model = load_model(args.model)
    image = read_image(args.image)
    landmarks = read_landmarks(args.landmarks, len(model.landmark_indices))
    init = read_params(args.init, model)[0] if args.init else None
    weights = CoarseWeights(args.w1, args.w2, args.w3, args.w4, args.omega_s, args.omega_e, args.omega_t)
    res = fit_coarse(image, landmarks, model, init, _fit_cfg(args), weights)
    if res.status == "diverged":
        raise RuntimeError("coarse fit diverged")
    H, W = image.shape[:2]
    args.out.mkdir(parents=True, exist_ok=True)
    write_params(args.out / "params.json", res.params, model, (W, H))
    r = render_face(model, res.params.coeffs, res.params.pose, res.params.lighting, W, H)
    write_image(args.out / "overlay.png", np.where(r.mask[:, :, None], np.clip(r.color, 0, 1), image))
    write_obj(args.out / "mesh.obj", _model_mesh(model, res.params.coeffs))
    _write_trace(args.out / "trace.csv", res.trace, res.best_trace)
    print(f"coarse fit: {res.steps} steps, best loss {res.best_trace[-1]:.6g} ({res.status})", file=sys.stderr)
    return 0


def _cmd_fit_detail(args) -> int:
    import numpy as np

    from .facemodel import load_model
    from .io import ObjMesh, read_image, read_params, write_image, write_obj, write_uvmap
    from .losses import FineWeights, prepare_detail_state
    from .optim import fit_detail
    from .uvspace import render_from_uv

    model = load_model(args.model)
    image = read_image(args.image)
    scene, _ = read_params(args.params, model)
    weights = FineWeights(args.omega_p, args.omega_s_fine, args.omega_d, args.w_sn, args.w_sz, args.w_dn, args.w_dz)
    res = fit_detail(image, scene, model, _fit_cfg(args), weights, res=args.res, mode=args.mode)
    if res.status == "diverged":
        raise RuntimeError("detail fit diverged")
    H, W = image.shape[:2]
    args.out.mkdir(parents=True, exist_ok=True)
    write_uvmap(args.out / "displacement.uvm", res.displacement)
    write_obj(args.out / "detail.obj", ObjMesh(res.mesh.vertices, res.mesh.triangles))
    state = prepare_detail_state(model, scene, args.res, W, H, args.mode)
    r = render_from_uv(res.detail_pos, state.albedo, scene.lighting, W, H)
    write_image(args.out / "render.png", np.clip(r.color, 0, 1))
    _write_trace(args.out / "trace.csv", res.trace, res.best_trace)
    print(f"detail fit: {res.steps} steps, best loss {res.best_trace[-1]:.6g} ({res.status})", file=sys.stderr)
    return 0


def _cmd_render(args) -> int:
    import numpy as np

    from .facemodel import load_model
    from .io import read_params, write_image
    from .raster import render_face

    model = load_model(args.model)
    scene, meta = read_params(args.params, model)
    if args.size:
        W, H = args.size
    elif "image_size" in meta:
        W, H = meta["image_size"]
    else:
        raise UsageError("--size is required when the parameter file has no image_size")
    r = render_face(model, scene.coeffs, scene.pose, scene.lighting, int(W), int(H))
    if args.out.parent != Path(""):
        args.out.parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, np.clip(r.color, 0, 1))
    return 0


def _depth_image(vertices, triangles, lo, hi, res):
    """Orthographic z-buffer over the xy box [lo, hi] on a res x res grid."""
    import numpy as np

    from .raster import rasterize
    span = float(max(hi[0] - lo[0], hi[1] - lo[1]))
    if span <= 0:
        raise ValueError("mesh has no extent in x/y")
    centre = 0.5 * (lo + hi)
    xy = (vertices[:, :2] - centre) * (res / span)
    frag, _ = rasterize(xy, vertices[:, 2], None, triangles, res, res)
    return np.where(frag.mask, frag.depth, 0.0), frag.mask


def _load_depth(path: Path):
    from .io import read_depth_png, read_uvmap
    if path.suffix.lower() == ".png":
        return read_depth_png(path)
    m = read_uvmap(path)
    if m.channels != 1:
        raise ValueError(f"{path}: depth map must have one channel")
    return m.scalar, m.mask


def _cmd_eval(args) -> int:
    import numpy as np

    from . import metrics
    from .facemodel import load_model
    from .io import read_obj

    metric = args.metric or "p2p"
    if metric == "depth" and args.pred.suffix.lower() in (".png", ".uvm"):
        pd, pm = _load_depth(args.pred)
        gd, gm = _load_depth(args.gt)
        if pd.shape != gd.shape:
            raise ValueError(f"depth maps differ in size: {pd.shape} vs {gd.shape}")
        err = metrics.depth_error(pd, gd, pm & gm)
        print(json.dumps({"metric": "depth_error", "value": err, "n_pixels": int(np.sum(pm & gm))}))
        return 0

    pred = read_obj(args.pred)
    gt = read_obj(args.gt)
    pv, gv = pred.vertices, gt.vertices
    if args.icp:
        T = metrics.icp_align(pv, gv, gt.triangles)
        pv = T.apply(pv)
    result: dict = {}
    if args.crop_mm is not None:
        lm = None
        if args.model is not None:
            model = load_model(args.model)
            if model.n_vertices == len(gv):
                lm = model.landmark_indices
        centre = metrics.nose_tip(gv, lm)
        gcrop = metrics.crop_radius(gv, gt.triangles, centre, args.crop_mm)
        if gcrop.empty:
            raise ValueError(f"no ground-truth vertex within {args.crop_mm} mm of the nose tip")
        if metric == "p2p":
            if len(pv) != len(gv):
                raise ValueError(f"point-to-point needs equal vertex counts ({len(pv)} vs {len(gv)})")
            pcrop = metrics.CroppedMesh(pv[gcrop.kept], gcrop.triangles, gcrop.kept)
        else:
            pcrop = metrics.crop_radius(pv, pred.triangles, centre, args.crop_mm)
            if pcrop.empty:
                raise ValueError(f"no predicted vertex within {args.crop_mm} mm of the nose tip")
        pv, ptri, gv, gtri = pcrop.vertices, pcrop.triangles, gcrop.vertices, gcrop.triangles
        result["crop_mm"] = args.crop_mm
    else:
        ptri, gtri = pred.triangles, gt.triangles
    if metric == "p2p":
        result.update(metric="point_to_point_rmse", value=metrics.point_to_point_rmse(pv, gv))
    elif metric == "p2plane":
        mean, _ = metrics.point_to_plane(pv, gv, gtri)
        result.update(metric="point_to_plane", value=mean)
    else:
        lo = gv[:, :2].min(axis=0)
        hi = gv[:, :2].max(axis=0)
        pd, pm = _depth_image(pv, ptri, lo, hi, args.depth_res)
        gd, gm = _depth_image(gv, gtri, lo, hi, args.depth_res)
        result.update(metric="depth_error", value=metrics.depth_error(pd, gd, pm & gm))
    result["n_points"] = int(len(pv))
    print(json.dumps(result))
    return 0


def _cmd_blend(args) -> int:
    from .io import read_uvmap, write_uvmap
    from .uvspace import blend_uv_maps

    a = read_uvmap(args.a)
    b = read_uvmap(args.b)
    merged = blend_uv_maps(a, b, allow_view=args.allow_view)
    if args.out.parent != Path(""):
        args.out.parent.mkdir(parents=True, exist_ok=True)
    write_uvmap(args.out, merged)
    return 0


COMMANDS = {"synth": _cmd_synth, "fit-coarse": _cmd_fit_coarse, "fit-detail": _cmd_fit_detail,
            "render": _cmd_render, "eval": _cmd_eval, "blend-uv": _cmd_blend}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        _set_threads(args.threads)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facefit: error: {exc}", file=sys.stderr)
        return 2
    # numba probes an optional TBB threading layer and warns when it is too old
    warnings.filterwarnings("ignore", message=".*TBB.*")
    import logging
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    print(_repro_line(args), file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facefit: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"facefit: error: {exc.filename}: file not found", file=sys.stderr)
        return 1
    except (ValueError, IndexError, RuntimeError, OSError) as exc:
        print(f"facefit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
