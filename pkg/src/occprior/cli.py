"""Command-line entry points: train, render, splat, iou, ablate.

Exit codes: 0 success, 1 runtime failure (bad inputs, I/O), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import __version__
from .datasets import (DatasetError, PosedImageSet, build_procedural_dataset, camera_ring,
                       load_transforms, make_procedural_scene, sample_prior_cloud)
from .field import HashGridField
from .occupancy import (PointCloud, SplatConfig, degrade_prior, load_grid, save_grid, splat,
                        grid_iou)
from .ply import PlyError, load_ply
from .render import CameraModel, default_step, look_at
from .tensor import ConfigError
from .training import (TrainConfig, ablation_suite, evaluate_checkpoints, paper_config,
                       render_views, toy_config, train, with_bbox)

log = logging.getLogger("occprior")

DEFAULT_CHECKPOINTS = (10, 100, 500, 1000)


class CliUsageError(Exception):
    """Flag combination that cannot run; reported with usage text, exit 2."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_tree(path) -> str:
    """Hash of every file under ``path`` (relative names and contents)."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def write_png(path, image: np.ndarray):
    rgb = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path, format="PNG")


def resolve_threads(args) -> int:
    n = args.threads
    if n is None and os.environ.get("INGEO_THREADS"):
        try:
            n = int(os.environ["INGEO_THREADS"])
        except ValueError:
            raise CliUsageError(f"INGEO_THREADS must be an integer, got "
                                f"{os.environ['INGEO_THREADS']!r}")
    if n is not None and n < 1:
        raise CliUsageError("--threads must be >= 1")
    if getattr(args, "deterministic", False) and n is None:
        n = 1
    return n


# -- scenes --------------------------------------------------------------------

def load_scene(spec: str, preset: str = "toy", downscale: int = 4, cache_dir=None):
    """``procedural:<id>[:<scene seed>]`` or a NeRF-Synthetic style directory.

    Returns (train set, test set, scene-or-None, description dict).
    """
    if spec.startswith("procedural:"):
        parts = spec.split(":")
        if len(parts) not in (2, 3):
            raise CliUsageError(f"bad scene spec {spec!r}; use procedural:<id>[:<seed>]")
        seed = int(parts[2]) if len(parts) == 3 else 0
        size = 128 if preset == "toy" else 200
        ds = build_procedural_dataset(parts[1], seed, size=size, cache_dir=cache_dir)
        return ds.train, ds.test, ds.scene, {"kind": "procedural", "manifest": ds.manifest}
    path = Path(spec)
    if not path.is_dir():
        raise DatasetError(f"scene directory not found: {path}")
    tr = load_transforms(path, "train", downscale=downscale)
    try:
        te = load_transforms(path, "test", downscale=downscale)
    except DatasetError:
        te = tr
    return tr, te, None, {"kind": "directory", "path": str(path), "downscale": downscale,
                          "sha256": sha256_tree(path)}


def density_scale(args) -> float:
    if args.density_scale is not None:
        return args.density_scale
    return 1.0 if args.init == "random" else 100.0


def build_config(args, bbox) -> TrainConfig:
    preset = toy_config if args.preset == "toy" else paper_config
    cfg = preset()
    iters = args.iters
    checkpoints = args.checkpoints if args.checkpoints is not None else DEFAULT_CHECKPOINTS
    grid_res = args.grid_res or cfg.grid_resolution
    update = cfg.update
    if args.threshold is not None:
        update = replace(update, threshold=args.threshold)
    if args.update_warmup is not None:
        update = replace(update, warmup=args.update_warmup)
    if args.mean_capped is not None:
        update = replace(update, mean_capped=args.mean_capped)
    cfg = replace(
        cfg, grid_init=args.init, grid_resolution=grid_res, iterations=iters,
        checkpoints=tuple(c for c in checkpoints if c <= iters), seed=args.seed,
        update=update, update_grid=not args.frozen_grid,
        deterministic=bool(args.deterministic),
        model=replace(cfg.model, density_scale=density_scale(args)),
        splat=replace(cfg.splat, radius=args.splat_radius))
    for name in ("batch_rays", "step_divisions", "lr", "psnr_threshold"):
        value = getattr(args, name)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    return with_bbox(cfg, *bbox)


def load_prior(args, scene, bbox):
    """Prior cloud from ``--prior`` or sampled from a procedural scene."""
    info = None
    cloud = None
    if args.prior:
        cloud = load_ply(args.prior)
        info = {"path": str(args.prior), "sha256": sha256_file(args.prior)}
    elif args.prior_points:
        if scene is None:
            raise CliUsageError("--prior-points needs a procedural scene")
        cloud = sample_prior_cloud(scene, args.prior_points, args.prior_seed)
        info = {"sampled": args.prior_points, "seed": args.prior_seed}
    if cloud is not None and (args.prior_dropout or args.prior_jitter or args.prior_outliers):
        cloud = degrade_prior(cloud, args.prior_jitter, args.prior_dropout,
                              args.prior_outliers, args.prior_seed, bbox_min=bbox[0], bbox_max=bbox[1])
        info["degrade"] = {"jitter": args.prior_jitter, "dropout": args.prior_dropout,
                           "outliers": args.prior_outliers, "seed": args.prior_seed}
    return cloud, info


# -- train -------------------------------------------------------------------------

TRAIN_KEYS = ("scene", "init", "prior", "prior_points", "prior_seed", "prior_dropout",
              "prior_jitter", "prior_outliers", "snapshot", "density_scale", "splat_radius",
              "grid_res", "iters", "checkpoints", "seed", "deterministic", "preset",
              "threshold", "update_warmup", "mean_capped", "frozen_grid", "batch_rays",
              "step_divisions", "lr", "psnr_threshold", "downscale", "float_dump")


def _train_args_from_manifest(args):
    m = json.loads(Path(args.manifest).read_text())
    for k, v in m["arguments"].items():
        setattr(args, k, v)
    for key in ("prior", "snapshot"):
        entry = m["inputs"].get(key)
        if entry and "path" in entry and sha256_file(entry["path"]) != entry["sha256"]:
            raise DatasetError(f"{entry['path']}: content changed since the manifest was written")
    return m


def cmd_train(args) -> int:
    manifest_in = _train_args_from_manifest(args) if args.manifest else None
    if args.scene is None:
        raise CliUsageError("--scene is required")
    if args.init == "prior" and not (args.prior or args.prior_points):
        raise CliUsageError("--init prior needs --prior <ply> (or --prior-points)")
    if args.init == "snapshot" and not args.snapshot:
        raise CliUsageError("--init snapshot needs --snapshot <grid.ingo>")
    if args.iters < 0:
        raise CliUsageError("--iters must be >= 0")
    out = Path(args.out)
    tr, te, scene, scene_info = load_scene(args.scene, args.preset, args.downscale,
                                           args.cache_dir)
    cfg = build_config(args, (tr.bbox_min, tr.bbox_max))
    prior, prior_info = load_prior(args, scene, (tr.bbox_min, tr.bbox_max))
    snapshot = None
    inputs = {"scene": scene_info}
    if prior_info:
        inputs["prior"] = prior_info
    if args.snapshot:
        snapshot = load_grid(args.snapshot)
        inputs["snapshot"] = {"path": str(args.snapshot), "sha256": sha256_file(args.snapshot)}
    cfg.validate(prior if cfg.grid_init == "prior" else None, snapshot)

    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"manifest": "manifest.json", "initial_model": "model_init.ingw",
                 "initial_grid": "grid_init.ingo"}
    if cfg.iterations:
        artifacts.update(metrics="metrics.csv", report="report.json", model="model.ingw",
                         grid="grid.ingo", checkpoints="checkpoints/")
    manifest = {
        "tool": {"name": "occprior", "version": __version__},
        "command": "train",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "arguments": {k: getattr(args, k) for k in TRAIN_KEYS},
        "inputs": inputs,
        "artifacts": artifacts,
    }
    if manifest_in is not None:
        manifest["replayed_from"] = str(args.manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def progress(it, run):
        m = run.metrics[-1]
        if m["psnr"] is not None:
            print(f"iter {it:6d}  psnr {m['psnr']:.2f}  occupied {m['occupied_cells']}  "
                  f"samples/ray {m['samples_per_ray']:.2f}", flush=True)

    run = train(cfg, tr, te, prior=prior, snapshot=snapshot, keep_renders=True,
                progress=progress)
    save_grid(out / "grid_init.ingo", run.initial_grid)
    run.initial_model.save(out / "model_init.ingw")
    if cfg.iterations == 0:
        return 0
    run.model.save(out / "model.ingw")
    save_grid(out / "grid.ingo", run.grid)
    (out / "metrics.csv").write_text(run.metrics_csv())
    report = evaluate_checkpoints({"run": run}, cfg.psnr_threshold)
    (out / "report.json").write_text(report.to_json() + "\n")
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for it, imgs in sorted(run.renders.items()):
        for v, img in enumerate(imgs):
            write_png(ck / f"iter{it:06d}_view{v}.png", img)
            if args.float_dump:
                np.save(ck / f"iter{it:06d}_view{v}.npy", img.astype(np.float32))
    if run.skipped_steps:
        log.warning("%d optimizer steps skipped on non-finite gradients", run.skipped_steps)
    return 0


# -- render / splat / iou -----------------------------------------------------------

def load_camera(args) -> CameraModel:
    if args.camera:
        spec = json.loads(Path(args.camera).read_text())
        c2w = np.asarray(spec["c2w"], dtype=np.float64)[:3]
        return CameraModel(c2w, float(spec["focal"]), int(spec["width"]), int(spec["height"]))
    if args.view is not None:
        cams = camera_ring(max(args.view + 1, args.ring), args.radius, args.fov, args.size)
        return cams[args.view]
    eye = np.asarray(args.eye, dtype=np.float64)
    focal = 0.5 * args.size / np.tan(np.radians(args.fov) / 2)
    return CameraModel(look_at(eye), focal, args.size, args.size)


def cmd_render(args) -> int:
    model = HashGridField.load(args.model)
    grid = load_grid(args.grid)
    cam = load_camera(args)
    lo, hi = grid.bbox_min, grid.bbox_max
    data = PosedImageSet(np.zeros((1, cam.height, cam.width, 3), np.float32), [cam], "render",
                         lo, hi, tuple(args.background))
    step = default_step(lo, hi, args.step_divisions)
    imgs, _ = render_views(model, grid, data, step)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, imgs[0])
    if args.float_dump:
        np.save(out.with_suffix(".npy"), imgs[0])
    return 0


def cmd_splat(args) -> int:
    cloud = load_ply(args.ply) if args.ply else None
    if cloud is None:
        raise CliUsageError("splat needs a PLY file")
    if args.scene:
        scene = make_procedural_scene(args.scene.split(":")[1]) \
            if args.scene.startswith("procedural:") else None
        bbox = (scene.bbox_min, scene.bbox_max) if scene else ((-1.5,) * 3, (1.5,) * 3)
    else:
        bbox = (tuple(args.bbox[:3]), tuple(args.bbox[3:]))
    cfg = SplatConfig(radius=args.splat_radius, resolution=args.grid_res,
                      bbox_min=bbox[0], bbox_max=bbox[1])
    grid = splat(cloud, cfg, initial_density=args.initial_density)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, grid)
    stats = {"points": len(cloud), "dropped_points": grid.dropped_points,
             "occupied_cells": grid.n_occupied, "resolution": grid.resolution,
             "occupied_fraction": round(grid.n_occupied / grid.resolution**3, 6),
             "radius": args.splat_radius, "ply_sha256": sha256_file(args.ply),
             "grid_sha256": sha256_file(out)}
    stats_path = Path(args.stats) if args.stats else out.with_suffix(".json")
    stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_iou(args) -> int:
    a, b = load_grid(args.a), load_grid(args.b)
    print(f"{grid_iou(a, b):.6f}")
    return 0


def cmd_ablate(args) -> int:
    tr, te, scene, scene_info = load_scene(args.scene, args.preset, args.downscale,
                                           args.cache_dir)
    args.init, args.frozen_grid, args.seed = "random", False, args.seeds[0]
    base = build_config(args, (tr.bbox_min, tr.bbox_max))
    prior, prior_info = load_prior(args, scene, (tr.bbox_min, tr.bbox_max))
    if prior is None:
        raise CliUsageError("ablate needs --prior <ply> or --prior-points")
    updates = (True,) if args.updating_only else (True, False)

    def progress(name, seed, run):
        its, vals = run.psnr_curve()
        print(f"{name:28s} seed {seed}  " + "  ".join(f"{i}:{v:.2f}" for i, v in
                                                    zip(its, vals)), flush=True)

    rep = ablation_suite(base, tr, te, prior, seeds=tuple(args.seeds), updates=updates,
                         progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(rep.to_json() + "\n")
    (out / "ablation.csv").write_text(rep.to_csv())
    (out / "manifest.json").write_text(json.dumps({
        "tool": {"name": "occprior", "version": __version__}, "command": "ablate",
        "seeds": list(args.seeds), "config": base.to_dict(),
        "inputs": {"scene": scene_info, "prior": prior_info},
        "artifacts": {"report": "ablation.json", "table": "ablation.csv"},
    }, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(rep.to_csv())
    return 0


# -- parser -----------------------------------------------------------------------------

def _add_training_flags(p, ablate=False):
    p.add_argument("--scene", help="scene directory or procedural:<id>[:<seed>]",
                   required=ablate)
    p.add_argument("--preset", choices=("toy", "paper"), default="toy")
    if not ablate:
        p.add_argument("--init", choices=("random", "prior", "snapshot"), default="random")
        p.add_argument("--snapshot", help="INGO grid file for --init snapshot")
        p.add_argument("--frozen-grid", action="store_true",
                       help="never update the occupancy grid")
        p.add_argument("--density-scale", type=float,
                       help="density activation scale (default 100 with a prior or "
                            "snapshot grid, 1 for random init)")
        p.add_argument("--splat-radius", type=float, default=1.0)
    else:
        p.set_defaults(density_scale=1.0, splat_radius=1.0, snapshot=None)
    p.add_argument("--prior", help="PLY point cloud")
    p.add_argument("--prior-points", type=int, default=0,
                   help="sample this many prior points from a procedural scene")
    p.add_argument("--prior-seed", type=int, default=0)
    p.add_argument("--prior-dropout", type=float, default=0.0)
    p.add_argument("--prior-jitter", type=float, default=0.0)
    p.add_argument("--prior-outliers", type=float, default=0.0)
    p.add_argument("--grid-res", type=int)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--checkpoints", type=int, nargs="+")
    p.add_argument("--threshold", type=float, help="occupancy density threshold")
    p.add_argument("--update-warmup", type=int)
    p.add_argument("--mean-capped", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--batch-rays", type=int)
    p.add_argument("--step-divisions", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--psnr-threshold", type=float)
    p.add_argument("--downscale", type=int, default=4)
    p.add_argument("--cache-dir", default=os.environ.get("INGEO_CACHE"),
                   help="reuse rendered procedural datasets (env INGEO_CACHE)")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occprior", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"occprior {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a field and write metrics and snapshots")
    _add_training_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--float-dump", action="store_true",
                   help="also write checkpoint renders as float32 .npy")
    p.add_argument("--manifest", help="re-run the configuration recorded in a manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a model and grid snapshot to PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", required=True)
    cam = p.add_mutually_exclusive_group()
    cam.add_argument("--camera", help="JSON with c2w (3x4 or 4x4), focal, width, height")
    cam.add_argument("--view", type=int, help="index into the default camera ring")
    cam.add_argument("--eye", type=float, nargs=3, default=(0.0, -3.0, 1.0))
    p.add_argument("--ring", type=int, default=32)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--fov", type=float, default=30.0)
    p.add_argument("--background", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--step-divisions", type=int, default=1024)
    p.add_argument("--float-dump", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("splat", help="convert a PLY point cloud to an INGO grid")
    p.add_argument("--ply", required=True)
    p.add_argument("--grid-res", type=int, default=128)
    p.add_argument("--splat-radius", type=float, default=1.0)
    p.add_argument("--bbox", type=float, nargs=6, default=(-1, -1, -1, 1, 1, 1),
                   metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    p.add_argument("--scene", help="take the bounding box from this scene")
    p.add_argument("--initial-density", type=float, default=10.0)
    p.add_argument("--stats", help="statistics JSON (default: next to --out)")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_splat)

    p = sub.add_parser("iou", help="intersection over union of two INGO grids")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_iou)

    p = sub.add_parser("ablate", help="run the ablation matrix over seeds")
    _add_training_flags(p, ablate=True)
    p.add_argument("--seeds", type=int, nargs="+", default=(0, 1, 2))
    p.add_argument("--updating-only", action="store_true",
                   help="skip the frozen-grid variants")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args)
        if threads == 1 and hasattr(args, "deterministic"):
            args.deterministic = True
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (CliUsageError, ConfigError) as err:
        parser.print_usage(sys.stderr)
        print(f"occprior {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (DatasetError, PlyError, OSError, ValueError, RuntimeError) as err:
        print(f"occprior {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
