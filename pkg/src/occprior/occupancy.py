"""Occupancy grids seeded from point-cloud priors.

A grid stores three flat arrays of ``R**3`` entries in x-fastest order
(``index = x + R * (y + R * z)``): the occupancy bits, a density cache, and
the prior mask. The prior mask is fixed once the grid is built and is always
a subset of the occupancy bits.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import ConfigError, UsageError

log = logging.getLogger(__name__)

GRID_MAGIC = b"INGO"
GRID_VERSION = 1


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    source: str = "synthetic"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors must length-match points")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, source="synthetic"):
        return cls(np.zeros((0, 3)), source=source)


def _check_bbox(bbox_min, bbox_max):
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
        raise ConfigError(f"degenerate bounding box {lo} .. {hi}")
    return lo, hi


@dataclass
class OccupancyGrid:
    resolution: int
    bbox_min: tuple
    bbox_max: tuple
    occupancy: np.ndarray = None
    density: np.ndarray = None
    prior: np.ndarray = None
    dropped_points: int = 0

    def __post_init__(self):
        _check_bbox(self.bbox_min, self.bbox_max)
        self.bbox_min = tuple(float(v) for v in self.bbox_min)
        self.bbox_max = tuple(float(v) for v in self.bbox_max)
        n = self.n_cells
        if self.occupancy is None:
            self.occupancy = np.zeros(n, dtype=bool)
        if self.density is None:
            self.density = np.zeros(n, dtype=np.float32)
        if self.prior is None:
            self.prior = np.zeros(n, dtype=bool)
        for name in ("occupancy", "density", "prior"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ConfigError(f"{name} has shape {arr.shape}, expected ({n},)")

    @property
    def n_cells(self) -> int:
        return self.resolution**3

    @property
    def cell_size(self) -> np.ndarray:
        return (np.asarray(self.bbox_max) - np.asarray(self.bbox_min)) / self.resolution

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    @classmethod
    def full(cls, resolution, bbox_min, bbox_max):
        """Every cell occupied, empty cache, no prior."""
        return cls(resolution, bbox_min, bbox_max,
                   occupancy=np.ones(resolution**3, dtype=bool))

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.bbox_min, self.bbox_max,
                             self.occupancy.copy(), self.density.copy(),
                             self.prior.copy(), self.dropped_points)

    def same_shape(self, other: "OccupancyGrid") -> bool:
        return (self.resolution == other.resolution
                and np.allclose(self.bbox_min, other.bbox_min)
                and np.allclose(self.bbox_max, other.bbox_max))

    def cell_centers(self, flat_index=None) -> np.ndarray:
        if flat_index is None:
            flat_index = np.arange(self.n_cells)
        ijk = unravel(flat_index, self.resolution)
        return np.asarray(self.bbox_min) + (ijk + 0.5) * self.cell_size

    def check_invariants(self):
        assert not np.any(self.prior & ~self.occupancy), "prior cell not occupied"
        assert np.all(np.isfinite(self.density)) and np.all(self.density >= 0)


def unravel(flat_index, resolution) -> np.ndarray:
    flat_index = np.asarray(flat_index)
    x = flat_index % resolution
    y = (flat_index // resolution) % resolution
    z = flat_index // (resolution * resolution)
    return np.stack([x, y, z], axis=-1)


def ravel(ijk, resolution) -> np.ndarray:
    ijk = np.asarray(ijk)
    return ijk[..., 0] + resolution * (ijk[..., 1] + resolution * ijk[..., 2])


def cell_coords(grid: OccupancyGrid, points: np.ndarray):
    """Continuous cell coordinates and an inside-box mask for ``(n, 3)`` points."""
    lo = np.asarray(grid.bbox_min)
    hi = np.asarray(grid.bbox_max)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return (pts - lo) / (hi - lo) * grid.resolution, inside


def cell_index(grid: OccupancyGrid, points: np.ndarray):
    """Flat containing-cell index (floor, upper face folded into the last cell)."""
    uvw, inside = cell_coords(grid, points)
    ijk = np.clip(np.floor(uvw), 0, grid.resolution - 1).astype(np.int64)
    return ravel(ijk, grid.resolution), inside


def occupied(grid: OccupancyGrid, points: np.ndarray) -> np.ndarray:
    """Occupancy bit of the containing cell; points outside the box are empty."""
    pts = np.asarray(points)
    single = pts.ndim == 1
    idx, inside = cell_index(grid, pts)
    out = np.zeros(len(idx), dtype=bool)
    out[inside] = grid.occupancy[idx[inside]]
    return bool(out[0]) if single else out


# -- splatting ---------------------------------------------------------------

@dataclass
class SplatConfig:
    radius: float = 1.0  # in cell widths
    resolution: int = 128
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    # cache value given to prior cells, None -> use the update threshold
    initial_density: Optional[float] = None

    def __post_init__(self):
        if not self.radius >= 0:
            raise ConfigError("splat radius must be >= 0")
        if self.resolution < 1:
            raise ConfigError("resolution must be >= 1")
        _check_bbox(self.bbox_min, self.bbox_max)


def splat(cloud: PointCloud, cfg: SplatConfig, initial_density: float = 10.0) -> OccupancyGrid:
    """Voxelize a point cloud into a grid whose prior mask equals its occupancy.

    A cell is marked when it contains a point or when its center lies within
    ``cfg.radius`` cell widths of a point. Points outside the box are dropped
    and counted in ``grid.dropped_points``.
    """
    grid = OccupancyGrid(cfg.resolution, cfg.bbox_min, cfg.bbox_max)
    R = cfg.resolution
    if len(cloud):
        uvw, inside = cell_coords(grid, cloud.points)
        n_out = int((~inside).sum())
        if n_out:
            log.warning("splat: dropped %d point(s) outside the bounding box", n_out)
        grid.dropped_points = n_out
        uvw = uvw[inside]
        home = np.clip(np.floor(uvw), 0, R - 1).astype(np.int64)
        marked = [ravel(home, R)]
        reach = int(math.ceil(cfg.radius))
        if reach:
            r2 = cfg.radius**2
            span = range(-reach, reach + 1)
            for dz in span:
                for dy in span:
                    for dx in span:
                        if (dx, dy, dz) == (0, 0, 0):
                            continue
                        cand = home + np.array([dx, dy, dz])
                        ok = np.all((cand >= 0) & (cand < R), axis=1)
                        d2 = np.sum((cand + 0.5 - uvw) ** 2, axis=1)
                        ok &= d2 <= r2
                        marked.append(ravel(cand[ok], R))
        cells = np.unique(np.concatenate(marked))
        grid.occupancy[cells] = True
        grid.prior[cells] = True
        init = cfg.initial_density if cfg.initial_density is not None else initial_density
        grid.density[cells] = init
    return grid


# -- grid updates ------------------------------------------------------------

@dataclass
class GridUpdateConfig:
    threshold: float = 10.0
    decay: float = 0.95
    period: int = 16
    # floor on the uniform sample count so an emptied grid can still recover
    min_uniform_samples: int = 4096
    # cap the threshold at the mean cache value (bootstrap from an untrained model)
    mean_capped: bool = False
    # training iterations before the first update (the grid is left as initialized)
    warmup: int = 0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError("threshold must be > 0")
        if not 0 < self.decay < 1:
            raise ConfigError("decay must lie in (0, 1)")
        if self.period < 1:
            raise ConfigError("period must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")


@dataclass
class UpdateReport:
    added: int
    removed: int
    n_samples: int
    threshold: float
    n_occupied: int


def _jittered_points(grid: OccupancyGrid, cells: np.ndarray, rng) -> np.ndarray:
    ijk = unravel(cells, grid.resolution)
    frac = rng.random((len(cells), 3))
    return np.asarray(grid.bbox_min) + (ijk + frac) * grid.cell_size


def update_grid(grid: OccupancyGrid, density_probe: Callable[[np.ndarray], np.ndarray],
                cfg: GridUpdateConfig, rng) -> UpdateReport:
    """One locked-union refresh of ``grid`` in place.

    Every occupied cell gets one jittered probe and as many cells again are
    probed uniformly at random. Each probed cell's cache becomes
    ``max(decay * cache, probe)``; a cell is then occupied when it is in the
    prior mask or its cache exceeds the threshold.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    before = grid.occupancy.copy()
    occ_cells = np.flatnonzero(grid.occupancy)
    n_uniform = max(len(occ_cells), cfg.min_uniform_samples)
    uni_cells = rng.integers(0, grid.n_cells, n_uniform)
    cells = np.concatenate([occ_cells, uni_cells])
    pts = _jittered_points(grid, cells, rng)
    hi = np.asarray(grid.bbox_max)
    pts = np.minimum(pts, hi)
    sigma = np.asarray(density_probe(pts), dtype=np.float64).reshape(-1)
    if sigma.shape != (len(cells),):
        raise UsageError(f"probe returned {sigma.shape}, expected ({len(cells)},)")
    sigma = np.where(np.isfinite(sigma), np.maximum(sigma, 0.0), 0.0)
    newest = np.zeros(grid.n_cells)
    np.maximum.at(newest, cells, sigma)
    sampled = np.zeros(grid.n_cells, dtype=bool)
    sampled[cells] = True
    cache = grid.density.astype(np.float64)
    cache[sampled] = np.maximum(cfg.decay * cache[sampled], newest[sampled])
    grid.density = cache.astype(np.float32)
    thresh = cfg.threshold
    if cfg.mean_capped:
        thresh = min(thresh, float(cache.mean()))
    grid.occupancy = grid.prior | (grid.density > thresh)
    return UpdateReport(added=int((grid.occupancy & ~before).sum()),
                        removed=int((before & ~grid.occupancy).sum()),
                        n_samples=len(cells), threshold=thresh,
                        n_occupied=grid.n_occupied)


def grid_iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if not a.same_shape(b):
        raise UsageError("grids differ in resolution or bounding box")
    union = int(np.count_nonzero(a.occupancy | b.occupancy))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.occupancy & b.occupancy)) / union


def grid_to_cloud(grid: OccupancyGrid) -> PointCloud:
    return PointCloud(grid.cell_centers(np.flatnonzero(grid.occupancy)), source="grid")


def degrade_prior(cloud, jitter_sigma=0.0, dropout_fraction=0.0,
                  extra_outlier_fraction=0.0, rng_seed=0,
                  bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)) -> PointCloud:
    """Drop, jitter and pad a prior to imitate structure-from-motion output.

    Outliers are drawn uniformly in the box, ``extra_outlier_fraction`` times
    the input size. Accepts a grid too, which is first turned into its
    occupied cell centers.
    """
    for name, v in (("dropout_fraction", dropout_fraction),
                    ("extra_outlier_fraction", extra_outlier_fraction)):
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    if isinstance(cloud, OccupancyGrid):
        bbox_min, bbox_max = cloud.bbox_min, cloud.bbox_max
        cloud = grid_to_cloud(cloud)
    rng = np.random.default_rng(rng_seed)
    n = len(cloud)
    keep = rng.random(n) >= dropout_fraction
    pts = cloud.points[keep]
    if jitter_sigma > 0:
        pts = pts + rng.normal(0.0, jitter_sigma, pts.shape)
    colors = cloud.colors[keep] if cloud.colors is not None else None
    n_out = int(round(extra_outlier_fraction * n))
    if n_out:
        lo, hi = _check_bbox(bbox_min, bbox_max)
        extra = rng.uniform(lo, hi, (n_out, 3))
        pts = np.concatenate([pts, extra])
        if colors is not None:
            colors = np.concatenate([colors, rng.random((n_out, 3))])
    return PointCloud(pts, colors, source=cloud.source)


# -- snapshot file -----------------------------------------------------------

def save_grid(path, grid: OccupancyGrid):
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<II", GRID_VERSION, grid.resolution))
        fh.write(struct.pack("<6f", *grid.bbox_min, *grid.bbox_max))
        fh.write(np.packbits(grid.occupancy, bitorder="little").tobytes())
        fh.write(np.packbits(grid.prior, bitorder="little").tobytes())
        fh.write(grid.density.astype("<f4").tobytes())


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not an occupancy grid file (magic {blob[:4]!r})")
    version, R = struct.unpack_from("<II", blob, 4)
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid version {version}")
    box = struct.unpack_from("<6f", blob, 12)
    n = R**3
    nbytes = (n + 7) // 8
    off = 36
    expected = off + 2 * nbytes + 4 * n
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")

    def bits(o):
        raw = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=o)
        return np.unpackbits(raw, bitorder="little")[:n].astype(bool)

    occ = bits(off)
    prior = bits(off + nbytes)
    dens = np.frombuffer(blob, dtype="<f4", count=n, offset=off + 2 * nbytes).astype(np.float32)
    return OccupancyGrid(R, box[:3], box[3:], occ, dens, prior)
