"""Multi-resolution hash-grid encoding of 3D points.

Each level is a lattice of ``N_l + 1`` vertices per axis over the scene box.
Levels whose vertex count fits in the table use direct row-major addressing;
finer levels use the XOR-of-primes spatial hash. A point's feature at a level
is the trilinear blend of its 8 surrounding vertex entries, and the levels
are concatenated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .tensor import DEFAULT_BACKEND, ConfigError

PRIMES = (1, 2654435761, 805459861)

# corner offsets in (x, y, z), x fastest
CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
_CORNER_BITS = CORNERS.T.astype(bool)  # (3, 8)


@dataclass
class HashGridConfig:
    n_levels: int = 16
    table_size: int = 2**19
    n_features: int = 2
    base_resolution: int = 16
    max_resolution: int = 2048
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.n_levels < 1:
            raise ConfigError("n_levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError("table_size must be a power of two")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.base_resolution < 2:
            raise ConfigError("base_resolution must be >= 2")
        if self.max_resolution < self.base_resolution:
            raise ConfigError("max_resolution must be >= base_resolution")
        if self.max_resolution >= 2**20:
            raise ConfigError("max_resolution must be < 2**20 (int64 hashing)")
        if self.n_levels > 1 and self.growth_factor <= 1:
            raise ConfigError("growth factor must exceed 1")
        lo, hi = np.asarray(self.bbox_min, float), np.asarray(self.bbox_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ConfigError("bounding box must have positive extent on every axis")

    @property
    def growth_factor(self) -> float:
        if self.n_levels == 1:
            return 2.0
        return math.exp((math.log(self.max_resolution) - math.log(self.base_resolution))
                        / (self.n_levels - 1))

    @property
    def resolutions(self) -> list[int]:
        b = self.growth_factor
        # tiny epsilon so that e.g. 16 * 2**3 does not floor to 127
        return [int(math.floor(self.base_resolution * b**l + 1e-6))
                for l in range(self.n_levels)]

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    def is_dense(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 <= self.table_size


def toy_hashgrid(**overrides) -> HashGridConfig:
    kw = dict(n_levels=8, table_size=2**14, n_features=2, base_resolution=16,
              max_resolution=256)
    kw.update(overrides)
    return HashGridConfig(**kw)


@dataclass
class FeatureTables:
    data: np.ndarray  # (L, T, F)
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    @classmethod
    def create(cls, cfg: HashGridConfig, rng, dtype=np.float32, init_range=1e-4):
        data = rng.uniform(-init_range, init_range,
                           (cfg.n_levels, cfg.table_size, cfg.n_features)).astype(dtype)
        return cls(data)

    @classmethod
    def zeros(cls, cfg: HashGridConfig, dtype=np.float32):
        return cls(np.zeros((cfg.n_levels, cfg.table_size, cfg.n_features), dtype))

    def check(self, cfg: HashGridConfig):
        if self.data.shape != (cfg.n_levels, cfg.table_size, cfg.n_features):
            raise ConfigError(f"table shape {self.data.shape} does not match config")

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "FeatureTables":
        return FeatureTables(self.data.astype(dtype), self.grad.astype(dtype))


def hash_index(resolution: int, vertex, table_size: int) -> np.ndarray:
    """Table index of integer lattice vertices (``(..., 3)``) at a level.

    Direct addressing when the level's ``(resolution + 1)**3`` vertices fit in
    the table, otherwise the masked XOR hash.
    """
    v = np.asarray(vertex, dtype=np.uint64)
    side = resolution + 1
    if side**3 <= table_size:
        return (v[..., 0] + v[..., 1] * np.uint64(side)
                + v[..., 2] * np.uint64(side * side)).astype(np.int64)
    h = (v[..., 0] * np.uint64(PRIMES[0])) ^ (v[..., 1] * np.uint64(PRIMES[1])) \
        ^ (v[..., 2] * np.uint64(PRIMES[2]))
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _level_corners(resolution: int, table_size: int, base: np.ndarray) -> np.ndarray:
    # base: (n, 3) int64 -> (n, 8) indices, corner order as in CORNERS.
    # Vertex coordinates stay below 2**20, so the prime products fit in int64
    # and agree with the uint64 hash in every bit the mask keeps.
    side = resolution + 1
    xs = base[:, 0, None] + CORNERS[:, 0]
    ys = base[:, 1, None] + CORNERS[:, 1]
    zs = base[:, 2, None] + CORNERS[:, 2]
    if side**3 <= table_size:
        return xs + ys * side + zs * (side * side)
    idx = (xs * PRIMES[0]) ^ (ys * PRIMES[1]) ^ (zs * PRIMES[2])
    return idx & (table_size - 1)


@dataclass
class Footprint:
    """Per-level corner indices into the flattened (L*T) table and weights."""

    index: np.ndarray  # (L, n, 8) int64, already offset by level * T
    weight: np.ndarray  # (L, n, 8)

    @property
    def n_points(self) -> int:
        return self.index.shape[1]


def normalize_points(points: np.ndarray, cfg: HashGridConfig) -> np.ndarray:
    lo = np.asarray(cfg.bbox_min)
    hi = np.asarray(cfg.bbox_max)
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (n, 3), got {pts.shape}")
    bad = ~np.all((pts >= lo) & (pts <= hi), axis=1)
    if bad.any():
        first = pts[np.argmax(bad)]
        raise ValueError(f"{int(bad.sum())} point(s) outside the scene box, e.g. {first}")
    return (pts - lo) / (hi - lo)


def encode(points: np.ndarray, tables: FeatureTables, cfg: HashGridConfig,
           footprint: bool = True, backend: str | None = None):
    """Encode ``(n, 3)`` points to ``(n, L*F)`` features plus the backward footprint
    (``None`` when ``footprint`` is false).

    ``backend`` is ``"numba"`` (compiled loop, the default) or ``"numpy"``
    (vectorized reference).
    """
    u = normalize_points(points, cfg).astype(np.float64)
    if (backend or DEFAULT_BACKEND) == "numba":
        return _encode_numba(u, tables, cfg, footprint)
    return _encode_numpy(u, tables, cfg, footprint)


def _encode_numpy(u, tables, cfg, footprint):
    dtype = tables.data.dtype
    n = len(u)
    L, T, F = tables.data.shape
    feats = np.empty((n, L * F), dtype=dtype)
    if footprint:
        index = np.empty((L, n, 8), dtype=np.int64)
        weight = np.empty((L, n, 8), dtype=dtype)
    for l, res in enumerate(cfg.resolutions):
        p = u * res
        base = np.minimum(p.astype(np.int64), res - 1)  # p >= 0, so truncation is floor
        frac = (p - base).astype(dtype)
        idx = _level_corners(res, T, base)
        gx, gy, gz = frac[:, 0, None], frac[:, 1, None], frac[:, 2, None]
        w = (np.where(_CORNER_BITS[0], gx, 1 - gx) * np.where(_CORNER_BITS[1], gy, 1 - gy)
             * np.where(_CORNER_BITS[2], gz, 1 - gz))
        corner_feats = tables.data[l][idx]  # (n, 8, F)
        feats[:, l * F:(l + 1) * F] = np.einsum("nc,ncf->nf", w, corner_feats)
        if footprint:
            index[l] = idx + l * T
            weight[l] = w
    return feats, (Footprint(index, weight) if footprint else None)


def _encode_numba(u, tables, cfg, footprint):
    L, T, F = tables.data.shape
    n = len(u)
    dtype = tables.data.dtype
    res = np.asarray(cfg.resolutions, dtype=np.int64)
    dense = np.array([(r + 1) ** 3 <= T for r in cfg.resolutions])
    feats = np.zeros((n, L * F), dtype=dtype)
    shape = (L, n, 8) if footprint else (0, 0, 8)
    index = np.empty(shape, dtype=np.int64)
    weight = np.empty(shape, dtype=dtype)
    _encode_kernel(u, np.ascontiguousarray(tables.data), res, dense, feats, index, weight,
                   footprint)
    return feats, (Footprint(index, weight) if footprint else None)


def encode_backward(footprint: Footprint, upstream: np.ndarray, tables: FeatureTables,
                    backend: str | None = None):
    """Scatter-add ``weight * upstream`` into ``tables.grad`` (serial, deterministic)."""
    L, T, F = tables.data.shape
    upstream = np.asarray(upstream)
    if upstream.shape != (footprint.n_points, L * F):
        raise ValueError(f"upstream shape {upstream.shape} does not match footprint")
    if not upstream.any():
        return
    if (backend or DEFAULT_BACKEND) == "numba":
        grad = tables.grad.reshape(L * T, F)
        _scatter_kernel(footprint.index, footprint.weight,
                        np.ascontiguousarray(upstream, dtype=grad.dtype), grad)
        return
    offsets = np.arange(F)
    for l in range(L):
        local = footprint.index[l] - l * T  # (n, 8)
        slots = (local[:, :, None] * F + offsets).ravel()
        contrib = (footprint.weight[l][:, :, None] * upstream[:, None, l * F:(l + 1) * F]).ravel()
        tables.grad[l] += np.bincount(slots, weights=contrib, minlength=T * F) \
            .reshape(T, F).astype(tables.grad.dtype)


@numba.njit(cache=True, nogil=True)
def _encode_kernel(u, data, res, dense, feats, index, weight, store):
    n = u.shape[0]
    L, T, F = data.shape
    mask = T - 1
    for i in range(n):
        for l in range(L):
            r = res[l]
            side = r + 1
            px, py, pz = u[i, 0] * r, u[i, 1] * r, u[i, 2] * r
            bx, by, bz = min(int(px), r - 1), min(int(py), r - 1), min(int(pz), r - 1)
            fx, fy, fz = px - bx, py - by, pz - bz
            for c in range(8):
                ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                cx, cy, cz = bx + ox, by + oy, bz + oz
                if dense[l]:
                    j = cx + cy * side + cz * side * side
                else:
                    j = (cx ^ (cy * 2654435761) ^ (cz * 805459861)) & mask
                w = ((fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy)
                     * (fz if oz else 1.0 - fz))
                for f in range(F):
                    feats[i, l * F + f] += w * data[l, j, f]
                if store:
                    index[l, i, c] = j + l * T
                    weight[l, i, c] = w


@numba.njit(cache=True, nogil=True)
def _scatter_kernel(index, weight, upstream, grad):
    L, n, _ = index.shape
    F = grad.shape[1]
    for l in range(L):
        for i in range(n):
            for c in range(8):
                j = index[l, i, c]
                w = weight[l, i, c]
                for f in range(F):
                    grad[j, f] += w * upstream[i, l * F + f]
