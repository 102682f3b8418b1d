"""Grid-initialization quality sweep: snapshot, clean prior and degraded priors.

Trains a source run to convergence, then starts fresh models from its saved
occupancy grid and from splats of increasingly degraded priors, and reports
iterations-to-threshold together with each initial grid's IoU against the
converged one.

    python3 scripts/snapshot_sweep.py --out results/sweep
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from occprior.datasets import build_procedural_dataset, sample_prior_cloud
from occprior.occupancy import degrade_prior, grid_iou, save_grid
from occprior.training import initial_grid, iterations_to_threshold, toy_config, train, with_bbox


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="textured-sphere")
    ap.add_argument("--source-iters", type=int, default=1000)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--every", type=int, default=10)
    ap.add_argument("--dropouts", type=float, nargs="+", default=[0.0, 0.5, 0.9])
    ap.add_argument("--jitter", type=float, default=0.01)
    ap.add_argument("--prior-points", type=int, default=4000)
    ap.add_argument("--batch-rays", type=int, default=1024)
    ap.add_argument("--step-divisions", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache-dir", default=".cache")
    ap.add_argument("--out", default="results/sweep")
    args = ap.parse_args()

    data = build_procedural_dataset(args.scene, 0, cache_dir=args.cache_dir)
    lo, hi = data.scene.bbox_min, data.scene.bbox_max
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def cfg_for(init, iters, checkpoints, scale, seed):
        cfg = toy_config(grid_init=init, seed=seed, iterations=iters,
                         checkpoints=tuple(checkpoints), batch_rays=args.batch_rays,
                         step_divisions=args.step_divisions)
        return with_bbox(replace(cfg, model=replace(cfg.model, density_scale=scale)), lo, hi)

    source = train(cfg_for("random", args.source_iters, (args.source_iters,), 1.0, 100),
                   data.train, data.test)
    save_grid(out / "snapshot.ingo", source.grid)
    print(f"source run: PSNR {source.checkpoint_psnr}, {source.grid.n_occupied} cells")

    checkpoints = range(args.every, args.iters + 1, args.every)
    rows = []
    base_cloud = sample_prior_cloud(data.scene, args.prior_points, seed=0)
    arms = [("baseline", "random", 1.0, {})]
    arms.append(("snapshot", "snapshot", 100.0, {}))
    for d in args.dropouts:
        cloud = degrade_prior(base_cloud, jitter_sigma=args.jitter, dropout_fraction=d,
                              bbox_min=lo, bbox_max=hi)
        arms.append((f"prior dropout={d}", "prior", 100.0, {"prior": cloud}))
    for name, init, scale, extra in arms:
        cfg = cfg_for(init, args.iters, checkpoints, scale, args.seed)
        snap = source.grid if init == "snapshot" else None
        start = initial_grid(cfg, extra.get("prior"), snap)
        run = train(cfg, data.train, data.test, snapshot=snap, **extra)
        row = {"arm": name, "iters_to_threshold": iterations_to_threshold(
                   run.checkpoint_psnr, cfg.psnr_threshold),
               "iou_init_vs_converged": round(grid_iou(start, source.grid), 4),
               "iou_final_vs_converged": round(grid_iou(run.grid, source.grid), 4)}
        rows.append(row)
        print(json.dumps(row))
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
