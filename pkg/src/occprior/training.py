"""Training loop, checkpoint evaluation and the iteration-budget protocol."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import PosedImageSet
from .field import HashGridField, ModelConfig
from .hashgrid import HashGridConfig, toy_hashgrid
from .occupancy import (GridUpdateConfig, OccupancyGrid, PointCloud, SplatConfig, load_grid,
                        splat, update_grid)
from .render import (default_step, generate_rays, march_rays, render_chunked, render_rays,
                     render_rays_backward)
from .tensor import AdamState, ConfigError, adam_step

log = logging.getLogger(__name__)

GRID_INIT_MODES = ("random", "prior", "snapshot")
METRIC_FIELDS = ("iter", "loss", "psnr", "occupied_cells", "samples_per_ray", "wallclock_ms")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid_init: str = "random"
    grid_resolution: int = 128
    splat: SplatConfig = field(default_factory=SplatConfig)
    update: GridUpdateConfig = field(default_factory=GridUpdateConfig)
    update_grid: bool = True  # False freezes the initial grid
    batch_rays: int = 4096
    iterations: int = 1000
    checkpoints: tuple = (10, 100, 500, 1000)
    step_divisions: int = 1024  # marching step = box diagonal / step_divisions
    lr: float = 1e-2
    test_views: int = 4
    seed: int = 0
    deterministic: bool = True
    psnr_threshold: float = 25.0
    # end the run at the first checkpoint reaching psnr_threshold
    stop_at_threshold: bool = False
    # samples per forward/backward pass within one step; bounds memory only
    chunk_samples: int = 1 << 19

    def __post_init__(self):
        self.checkpoints = tuple(int(c) for c in self.checkpoints)

    def validate(self, prior=None, snapshot=None):
        if self.grid_init not in GRID_INIT_MODES:
            raise ConfigError(f"grid_init must be one of {GRID_INIT_MODES}")
        if self.grid_init == "prior" and prior is None:
            raise ConfigError("grid_init='prior' needs a prior point cloud")
        if self.grid_init == "snapshot" and snapshot is None:
            raise ConfigError("grid_init='snapshot' needs a grid snapshot")
        if self.batch_rays < 1:
            raise ConfigError("batch_rays must be >= 1")
        if self.chunk_samples < 1:
            raise ConfigError("chunk_samples must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ConfigError("checkpoints must be strictly ascending")
        if self.checkpoints and (self.checkpoints[0] < 1
                                 or self.checkpoints[-1] > max(self.iterations, 0)):
            if self.iterations:
                raise ConfigError("checkpoints must lie in [1, iterations]")

    @property
    def bbox(self):
        return self.model.grid.bbox_min, self.model.grid.bbox_max

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Inverse of :meth:`to_dict` (JSON lists become tuples again)."""
        d = dict(d)
        m = dict(d.pop("model"))
        g = m.pop("grid")
        g = HashGridConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in g.items()})
        sp = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("splat").items()}
        return cls(model=ModelConfig(grid=g, **m), splat=SplatConfig(**sp),
                   update=GridUpdateConfig(**d.pop("update")),
                   checkpoints=tuple(d.pop("checkpoints")), **d)


# presets cap the threshold at the mean cache so a random-init grid survives
# its first refresh from an untrained model
PRESET_UPDATE = GridUpdateConfig(mean_capped=True)


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale preset: small hash grid, 64**3 occupancy grid."""
    cfg = TrainConfig(model=ModelConfig(grid=toy_hashgrid()), grid_resolution=64,
                      splat=SplatConfig(resolution=64), update=PRESET_UPDATE)
    return replace(cfg, **overrides) if overrides else cfg


def paper_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(model=ModelConfig(grid=HashGridConfig()), grid_resolution=128,
                      splat=SplatConfig(resolution=128), update=PRESET_UPDATE)
    return replace(cfg, **overrides) if overrides else cfg


def with_bbox(cfg: TrainConfig, bbox_min, bbox_max) -> TrainConfig:
    grid = replace(cfg.model.grid, bbox_min=tuple(bbox_min), bbox_max=tuple(bbox_max))
    splat_cfg = replace(cfg.splat, bbox_min=tuple(bbox_min), bbox_max=tuple(bbox_max),
                        resolution=cfg.grid_resolution)
    return replace(cfg, model=replace(cfg.model, grid=grid), splat=splat_cfg)


@dataclass
class TrainRun:
    config: TrainConfig
    metrics: list = field(default_factory=list)  # one dict per iteration
    checkpoint_psnr: dict = field(default_factory=dict)
    model: Optional[HashGridField] = None
    grid: Optional[OccupancyGrid] = None
    initial_model: Optional[HashGridField] = None
    initial_grid: Optional[OccupancyGrid] = None
    renders: dict = field(default_factory=dict)  # iteration -> (n, H, W, 3)
    update_reports: list = field(default_factory=list)
    skipped_steps: int = 0

    def metrics_csv(self, include_wallclock: Optional[bool] = None) -> str:
        if include_wallclock is None:
            include_wallclock = not self.config.deterministic
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in self.metrics:
            w.writerow([m["iter"], f"{m['loss']:.8e}",
                        "" if m["psnr"] is None else f"{m['psnr']:.2f}",
                        m["occupied_cells"], f"{m['samples_per_ray']:.4f}",
                        f"{m['wallclock_ms']:.1f}" if include_wallclock else ""])
        return buf.getvalue()

    def psnr_curve(self):
        its = sorted(self.checkpoint_psnr)
        return its, [self.checkpoint_psnr[i] for i in its]


def ray_chunks(offsets, budget: int):
    """Consecutive ray ranges ``(r0, r1)`` holding at most ``budget`` samples each.

    Rays are never split; a single ray longer than the budget gets its own range.
    """
    offsets = np.asarray(offsets)
    n = len(offsets) - 1
    r0 = 0
    while r0 < n:
        r1 = int(np.searchsorted(offsets, offsets[r0] + budget, side="right")) - 1
        r1 = min(max(r1, r0 + 1), n)
        yield r0, r1
        r0 = r1


def psnr(rendered: np.ndarray, reference: np.ndarray) -> float:
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def initial_grid(cfg: TrainConfig, prior: Optional[PointCloud] = None,
                 snapshot: Optional[OccupancyGrid] = None) -> OccupancyGrid:
    lo, hi = cfg.bbox
    if cfg.grid_init == "random":
        return OccupancyGrid.full(cfg.grid_resolution, lo, hi)
    if cfg.grid_init == "prior":
        scfg = replace(cfg.splat, resolution=cfg.grid_resolution, bbox_min=lo, bbox_max=hi)
        return splat(prior, scfg, initial_density=cfg.update.threshold)
    if isinstance(snapshot, (str, Path)):
        snapshot = load_grid(snapshot)
    if snapshot.resolution != cfg.grid_resolution:
        raise ConfigError(f"snapshot resolution {snapshot.resolution} != "
                          f"{cfg.grid_resolution}")
    grid = snapshot.copy()
    # the inherited cells take the role of the prior mask
    grid.prior = grid.occupancy.copy()
    return grid


def render_views(model: HashGridField, grid: OccupancyGrid, data: PosedImageSet, step: float,
                 chunk_rays: int = 1 << 14):
    """Render every view of ``data`` with the fixed evaluation phase."""
    images = []
    n_samples = 0

    H, W = data.shape
    for cam in data.cameras:
        rays = generate_rays(cam, cam.all_pixels(), data.bbox_min, data.bbox_max)
        out = np.zeros((len(rays), 3))
        for s in range(0, len(rays), chunk_rays):
            part = rays.subset(slice(s, s + chunk_rays))
            rgb, _, _, used = render_chunked(part, model.evaluate, grid, step,
                                             data.background)
            out[s:s + chunk_rays] = rgb
            n_samples += int(used.sum())
        images.append(out.reshape(H, W, 3))
    return np.clip(np.stack(images), 0, 1).astype(np.float32), n_samples


def train(config: TrainConfig, data: PosedImageSet, test: Optional[PosedImageSet] = None,
          prior: Optional[PointCloud] = None, snapshot=None, keep_renders: bool = False,
          progress=None) -> TrainRun:
    """Fit a hash-grid field to ``data`` under ``config``.

    Each iteration samples ``batch_rays`` training pixels, marches them through
    the current occupancy grid, renders, and takes one Adam step on the mean
    squared color error. The grid is refreshed every ``update.period``
    iterations unless ``update_grid`` is off. Test PSNR is recorded at the
    configured checkpoints.
    """
    config.validate(prior, snapshot)
    test = test if test is not None else data
    if config.test_views and len(test) > config.test_views:
        test = test.subset(range(config.test_views))
    rng = np.random.default_rng(config.seed)
    model = HashGridField(config.model, np.random.default_rng(config.seed))
    grid = initial_grid(config, prior, snapshot)
    run = TrainRun(config, model=model, grid=grid, initial_model=model.copy(),
                   initial_grid=grid.copy())
    if config.iterations == 0:
        return run

    rays = data.rays()
    lo, hi = config.bbox
    step = default_step(lo, hi, config.step_divisions)
    bg = np.asarray(data.background, dtype=np.float64)
    params = model.params()
    adam = AdamState(lr=config.lr)
    checkpoints = set(config.checkpoints)
    t_start = time.perf_counter()
    n_total = len(rays)

    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, n_total, config.batch_rays)
        batch = rays.subset(idx)
        phase = rng.random(len(batch)) * step
        m = march_rays(batch, grid, step, phase)
        color = np.broadcast_to(bg, (len(batch), 3)).astype(np.float64)
        mlp_grads = None
        for r0, r1 in ray_chunks(m.offsets, config.chunk_samples):
            s0, s1 = m.offsets[r0], m.offsets[r1]
            if s0 == s1:
                continue
            sigma, rgb, tape = model.query(m.positions[s0:s1],
                                           batch.directions[m.ray_index[s0:s1]])
            color[r0:r1], samples = render_rays(sigma, rgb, step, m.offsets[r0:r1 + 1] - s0, bg)
            # the loss is a per-pixel mean, so each chunk's gradient is independent
            d_color = 2.0 * (color[r0:r1] - batch.targets[r0:r1]) / color.size
            d_sigma, d_rgb = render_rays_backward(samples, d_color)
            grads = model.backward(tape, d_sigma, d_rgb)
            if mlp_grads is None:
                mlp_grads = grads
            else:
                for acc, g in zip(mlp_grads, grads):
                    acc += g
        loss = float(np.mean((color - batch.targets) ** 2))
        if mlp_grads is not None:
            if not adam_step(adam, params, mlp_grads + [model.tables.grad]):
                log.warning("iteration %d: non-finite gradient, step skipped", it)
            model.zero_grad()

        if (config.update_grid and it % config.update.period == 0
                and it > config.update.warmup):
            rep = update_grid(grid, model.density, config.update, rng)
            run.update_reports.append((it, rep))
            assert not np.any(grid.prior & ~grid.occupancy)

        value = None
        if it in checkpoints:
            imgs, _ = render_views(model, grid, test, step)
            value = psnr(imgs, test.images)
            run.checkpoint_psnr[it] = value
            if keep_renders:
                run.renders[it] = imgs
            log.info("iter %d  psnr %.2f  occupied %d", it, value, grid.n_occupied)
        run.metrics.append(dict(
            iter=it, loss=loss, psnr=value, occupied_cells=grid.n_occupied,
            samples_per_ray=m.n_samples / len(batch),
            wallclock_ms=1000.0 * (time.perf_counter() - t_start)))
        if progress is not None:
            progress(it, run)
        if (config.stop_at_threshold and value is not None
                and value >= config.psnr_threshold):
            break
    run.skipped_steps = adam.skipped
    return run


# -- evaluation protocol -----------------------------------------------------

def iterations_to_threshold(checkpoint_psnr: dict, threshold: float) -> Optional[int]:
    for it in sorted(checkpoint_psnr):
        if checkpoint_psnr[it] >= threshold:
            return it
    return None


@dataclass
class EvalReport:
    threshold: float
    checkpoints: list
    psnr: dict  # run name -> {iteration: psnr}
    iters_to_threshold: dict  # run name -> int | None
    speedup: dict  # run name -> baseline iterations / this run's, or None
    iteration_ratio: dict  # run name -> this run's iterations / baseline, or None
    baseline: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({
            "threshold": self.threshold, "baseline": self.baseline,
            "checkpoints": self.checkpoints,
            "psnr": {k: {str(i): round(v, 2) for i, v in d.items()}
                     for k, d in self.psnr.items()},
            "iters_to_threshold": self.iters_to_threshold,
            "speedup": {k: (None if v is None else round(v, 4))
                        for k, v in self.speedup.items()},
            "iteration_ratio": {k: (None if v is None else round(v, 4))
                                for k, v in self.iteration_ratio.items()},
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run"] + [str(c) for c in self.checkpoints]
                   + ["iters_to_threshold", "speedup", "iteration_ratio"])

        def fmt(v):
            return "" if v is None else f"{v:.4f}"

        for name, curve in self.psnr.items():
            w.writerow([name] + [f"{curve[c]:.2f}" for c in self.checkpoints]
                       + [self.iters_to_threshold[name] or "",
                          fmt(self.speedup.get(name)), fmt(self.iteration_ratio.get(name))])
        return buf.getvalue()


def evaluate_checkpoints(runs: dict, threshold: float = 25.0,
                         baseline: Optional[str] = None) -> EvalReport:
    """Tabulate PSNR per checkpoint, iterations-to-threshold and speedup ratios.

    ``runs`` maps a name to a :class:`TrainRun` or to a ``{iteration: psnr}``
    dict. ``speedup`` is ``iters(baseline) / iters(run)`` and
    ``iteration_ratio`` its inverse, so a run needing half the baseline's
    iterations has speedup 2 and ratio 0.5.
    """
    curves = {k: dict(v.checkpoint_psnr if isinstance(v, TrainRun) else v)
              for k, v in runs.items()}
    sets = {tuple(sorted(c)) for c in curves.values()}
    if len(sets) > 1:
        raise ValueError(f"runs have different checkpoint sets: {sorted(sets)}")
    checkpoints = list(sets.pop()) if sets else []
    iters = {k: iterations_to_threshold(c, threshold) for k, c in curves.items()}
    speed, ratio = {}, {}
    if baseline is not None:
        if baseline not in curves:
            raise KeyError(f"baseline {baseline!r} not among runs")
        base = iters[baseline]
        for k, v in iters.items():
            ok = v is not None and base is not None
            speed[k] = base / v if ok else None
            ratio[k] = v / base if ok else None
    return EvalReport(threshold, checkpoints, curves, iters, speed, ratio, baseline)


# -- ablation matrix ---------------------------------------------------------

ABLATION_ARMS = {
    # name: (grid init, density scale, splat radius)
    "baseline": ("random", 1.0, None),
    "prior": ("prior", 1.0, 0.0),
    "prior+scale": ("prior", 100.0, 0.0),
    "prior+scale+splat": ("prior", 100.0, 1.0),
}


def arm_config(base: TrainConfig, arm: str, update: bool = True, seed: int = 0) -> TrainConfig:
    init, scale, radius = ABLATION_ARMS[arm]
    cfg = replace(base, grid_init=init, update_grid=update, seed=seed,
                  model=replace(base.model, density_scale=scale))
    if radius is not None:
        cfg = replace(cfg, splat=replace(cfg.splat, radius=radius))
    return cfg


def _ratio(a, b):
    if a is None:
        return float("inf")
    return a / b if b is not None else 0.0


@dataclass
class AblationReport:
    threshold: float
    seeds: list
    iters: dict  # "arm[/frozen]" -> [iterations-to-threshold per seed]
    psnr: dict  # "arm[/frozen]" -> [{iteration: psnr} per seed]
    baseline: str = "baseline"

    def ratios(self, name: str) -> list:
        """Paired per-seed ratio of iterations-to-threshold against the baseline.

        A run that never reaches the threshold counts as infinitely slow.
        """
        return [_ratio(a, b) for a, b in zip(self.iters[name], self.iters[self.baseline])]

    def median_ratio(self, name: str) -> float:
        return float(np.median(self.ratios(name)))

    def median_iters(self, name: str) -> float:
        return float(np.median([np.inf if v is None else v for v in self.iters[name]]))

    def fastest(self) -> list:
        """Names sharing the smallest median iterations-to-threshold."""
        med = {k: self.median_iters(k) for k in self.iters}
        best = min(med.values())
        return sorted(k for k, v in med.items() if v == best)

    def to_json(self) -> str:
        def clean(x):
            return None if not np.isfinite(x) else round(x, 4)
        return json.dumps({
            "threshold": self.threshold, "seeds": self.seeds, "baseline": self.baseline,
            "iters_to_threshold": self.iters,
            "median_ratio": {k: clean(self.median_ratio(k)) for k in self.iters},
            "psnr": {k: [{str(i): round(v, 2) for i, v in c.items()} for c in curves]
                     for k, curves in self.psnr.items()},
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm"] + [f"seed{s}" for s in self.seeds] + ["median_ratio"])
        for k, v in self.iters.items():
            w.writerow([k] + ["" if x is None else x for x in v]
                       + [f"{self.median_ratio(k):.4f}"])
        return buf.getvalue()


def ablation_suite(base: TrainConfig, data: PosedImageSet, test: Optional[PosedImageSet],
                   prior: PointCloud, seeds=(0, 1, 2), arms=tuple(ABLATION_ARMS),
                   updates=(True, False), progress=None) -> AblationReport:
    """Run every arm with every seed on the same data (paired design).

    Arms without grid updates are suffixed ``/frozen``.
    """
    iters, curves = {}, {}
    for arm in arms:
        for upd in updates:
            name = arm if upd else f"{arm}/frozen"
            iters[name], curves[name] = [], []
            for seed in seeds:
                cfg = arm_config(base, arm, upd, seed)
                run = train(cfg, data, test, prior=prior if cfg.grid_init == "prior" else None)
                iters[name].append(iterations_to_threshold(run.checkpoint_psnr,
                                                           base.psnr_threshold))
                curves[name].append(run.checkpoint_psnr)
                if progress is not None:
                    progress(name, seed, run)
    baseline = "baseline" if "baseline" in iters else next(iter(iters))
    return AblationReport(base.psnr_threshold, list(seeds), iters, curves, baseline)
