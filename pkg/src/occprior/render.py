"""Pinhole rays, occupancy-aware ray marching and emission-absorption compositing.

Samples for a batch of rays are kept packed: flat per-sample arrays ordered
by ray and then by distance, plus ``offsets`` so that ray ``r`` owns samples
``offsets[r]:offsets[r + 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .occupancy import OccupancyGrid, occupied
from .tensor import DEFAULT_BACKEND, EXP_CLAMP, ConfigError

TERMINATION_T = 1e-4
K_MAX = 1024


@dataclass
class CameraModel:
    c2w: np.ndarray  # (3, 4), OpenGL convention: camera looks down -z, y up
    focal: float
    width: int
    height: int
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)[:3, :4]
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        if not self.focal > 0:
            raise ConfigError("focal length must be positive")
        if not np.isfinite(self.c2w).all():
            raise ConfigError("camera pose must be finite")
        rot = self.c2w[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-4):
            raise ConfigError("camera rotation is not orthonormal")

    def all_pixels(self) -> np.ndarray:
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return np.stack([xs.ravel(), ys.ravel()], axis=1)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world ``(3, 4)`` matrix for a camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    return np.stack([right, cam_up, -fwd, eye], axis=1)


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    valid: np.ndarray
    targets: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx],
                        self.far[idx], self.valid[idx], pick(self.targets),
                        pick(self.pixels))


def intersect_box(origins, directions, bbox_min, bbox_max):
    """Slab test. Returns ``(near, far, hit)``; near is clipped at 0."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    hit = far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


def generate_rays(camera: CameraModel, pixels, bbox_min, bbox_max) -> RayBatch:
    """Rays through pixel centers, clipped to the scene box."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    dirs_cam = np.stack([(px[:, 0] + 0.5 - camera.cx) / camera.focal,
                         -(px[:, 1] + 0.5 - camera.cy) / camera.focal,
                         -np.ones(len(px))], axis=1)
    dirs = dirs_cam @ camera.c2w[:, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:, 3], dirs.shape).copy()
    near, far, hit = intersect_box(origins, dirs, bbox_min, bbox_max)
    return RayBatch(origins, dirs, near, far, hit, pixels=np.asarray(pixels).reshape(-1, 2))


def default_step(bbox_min, bbox_max, divisions=1024) -> float:
    return float(np.linalg.norm(np.subtract(bbox_max, bbox_min))) / divisions


@dataclass
class MarchResult:
    positions: np.ndarray  # (N, 3)
    t: np.ndarray  # (N,)
    ray_index: np.ndarray  # (N,)
    offsets: np.ndarray  # (n_rays + 1,)
    delta: float
    n_truncated: int = 0
    n_steps: int = 0  # uniform steps inspected, occupied or not

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def step_positions(rays: RayBatch, step: float, phase, k0: int, k1: int):
    """Uniform step distances ``near + phase + k * step`` for ``k0 <= k < k1``.

    Returns ``(t, in_range)`` of shape ``(n, k1 - k0)``.
    """
    phase = np.broadcast_to(np.asarray(phase, dtype=np.float64), (len(rays),))
    k = np.arange(k0, k1, dtype=np.float64)
    t = rays.near[:, None] + phase[:, None] + k[None, :] * step
    in_range = (t < rays.far[:, None]) & rays.valid[:, None]
    return t, in_range


def max_steps(rays: RayBatch, step: float) -> int:
    if not len(rays) or not rays.valid.any():
        return 0
    span = (rays.far - rays.near)[rays.valid].max()
    return int(np.ceil(span / step)) + 1


def march_rays(rays: RayBatch, grid: Optional[OccupancyGrid], step: float,
               phase=None, k_max: int = K_MAX, k_range=None,
               backend: Optional[str] = None) -> MarchResult:
    """Sample each ray uniformly and keep the positions that fall in occupied cells.

    ``phase`` is the offset of the first step from ``near`` (scalar or per
    ray); ``None`` means the fixed mid-step phase used for evaluation.
    ``grid=None`` marches densely. Rays with more than ``k_max`` occupied
    samples are truncated and counted. ``backend`` picks the compiled loop
    (``"numba"``, default) or the vectorized reference (``"numpy"``); both
    produce bitwise-identical samples.
    """
    if phase is None:
        phase = 0.5 * step
    k0, k1 = k_range if k_range is not None else (0, max_steps(rays, step))
    n = len(rays)
    if k1 <= k0 or n == 0:
        return MarchResult(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64),
                           np.zeros(n + 1, np.int64), step)
    if (backend or DEFAULT_BACKEND) == "numba":
        return _march_numba(rays, grid, step, phase, k_max, k0, k1)
    t, keep = step_positions(rays, step, phase, k0, k1)
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    if grid is not None:
        lo = np.asarray(grid.bbox_min)
        hi = np.asarray(grid.bbox_max)
        pos = np.clip(pos, lo, hi)
        occ = np.zeros_like(keep)
        occ[keep] = occupied(grid, pos[keep])
        n_steps = int(keep.sum())
        keep = occ
    else:
        n_steps = int(keep.sum())
    cum = np.cumsum(keep, axis=1)
    over = keep & (cum > k_max)
    n_trunc = int(over.any(axis=1).sum())
    keep &= ~over
    rows, cols = np.nonzero(keep)
    counts = np.bincount(rows, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return MarchResult(pos[rows, cols], t[rows, cols], rows.astype(np.int64), offsets,
                       step, n_trunc, n_steps)


def _march_numba(rays, grid, step, phase, k_max, k0, k1):
    n = len(rays)
    phase = np.ascontiguousarray(np.broadcast_to(np.asarray(phase, np.float64), (n,)))
    if grid is None:
        lo = hi = np.zeros(3)
        res, occ = 1, np.ones(1, dtype=bool)
    else:
        lo, hi = np.asarray(grid.bbox_min, np.float64), np.asarray(grid.bbox_max, np.float64)
        res, occ = grid.resolution, grid.occupancy
    args = (rays.origins.astype(np.float64), rays.directions.astype(np.float64),
            rays.near.astype(np.float64), rays.far.astype(np.float64), rays.valid, phase,
            float(step), k0, k1, lo, hi, res, occ, grid is not None, k_max)
    counts = np.zeros(n, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    pos, t, ray_index = np.empty((0, 3)), np.empty(0), np.empty(0, np.int64)
    n_steps, n_trunc = _march_kernel(*args, False, counts, offsets, pos, t, ray_index)
    np.cumsum(counts, out=offsets[1:])
    m = int(offsets[-1])
    pos, t, ray_index = np.empty((m, 3)), np.empty(m), np.empty(m, np.int64)
    _march_kernel(*args, True, counts, offsets, pos, t, ray_index)
    return MarchResult(pos, t, ray_index, offsets, step, int(n_trunc), int(n_steps))


@numba.njit(cache=True, nogil=True)
def _march_kernel(origins, dirs, near, far, valid, phase, step, k0, k1, lo, hi, res, occ,
                  use_grid, k_max, fill, counts, offsets, pos, ts, ray_index):
    # Same arithmetic order as the vectorized route, so positions match bitwise.
    n_steps = 0
    n_trunc = 0
    ex, ey, ez = hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]
    for r in range(near.shape[0]):
        if not valid[r]:
            continue
        kept = 0
        truncated = False
        start = offsets[r]
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        t0 = near[r] + phase[r]
        for k in range(k0, k1):
            t = t0 + float(k) * step
            if not t < far[r]:
                break
            n_steps += 1
            x, y, z = ox + t * dx, oy + t * dy, oz + t * dz
            if use_grid:
                x = min(max(x, lo[0]), hi[0])
                y = min(max(y, lo[1]), hi[1])
                z = min(max(z, lo[2]), hi[2])
                # coordinates are >= 0 after clipping, so truncation is floor
                ix = min(int((x - lo[0]) / ex * res), res - 1)
                iy = min(int((y - lo[1]) / ey * res), res - 1)
                iz = min(int((z - lo[2]) / ez * res), res - 1)
                if not occ[ix + res * (iy + res * iz)]:
                    continue
            if kept == k_max:
                truncated = True
                continue
            if fill:
                i = start + kept
                pos[i, 0], pos[i, 1], pos[i, 2] = x, y, z
                ts[i] = t
                ray_index[i] = r
            kept += 1
        counts[r] = kept
        n_trunc += truncated
    return n_steps, n_trunc


# -- compositing -------------------------------------------------------------

@dataclass
class RaySegmentSamples:
    """Per-sample compositing state of a packed ray batch."""

    ray_index: np.ndarray
    offsets: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    delta: np.ndarray
    trans: np.ndarray  # T_i, transmittance before each sample
    weight: np.ndarray  # zero past early termination
    kept: np.ndarray  # sample evaluated before termination
    t_end: np.ndarray  # per-ray residual transmittance
    background: np.ndarray  # (3,)

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1


def _segment_sum(values, ray_index, n_rays):
    if values.ndim == 1:
        return np.bincount(ray_index, weights=values, minlength=n_rays)
    return np.stack([np.bincount(ray_index, weights=values[:, c], minlength=n_rays)
                     for c in range(values.shape[1])], axis=1)


def _exclusive_segment_cumsum(values, offsets, reverse=False):
    """Per-ray exclusive prefix sums (suffix sums with ``reverse``) in float64.

    Each ray is scanned on its own so the result does not depend on the
    magnitude of the samples packed before it.
    """
    v = np.asarray(values, dtype=np.float64)
    flat = v.reshape(len(v), 1 if v.ndim == 1 else v.shape[1])
    out = np.empty_like(flat)
    _segment_scan_kernel(np.ascontiguousarray(flat), np.asarray(offsets, np.int64),
                         reverse, out)
    return out.reshape(v.shape)


@numba.njit(cache=True, nogil=True)
def _segment_scan_kernel(values, offsets, reverse, out):
    for r in range(offsets.shape[0] - 1):
        a, b = offsets[r], offsets[r + 1]
        for c in range(values.shape[1]):
            acc = 0.0
            for k in range(b - a):
                i = b - 1 - k if reverse else a + k
                out[i, c] = acc
                acc += values[i, c]


def render_rays(sigma, color, delta, offsets, background=(0.0, 0.0, 0.0),
                early_termination=True, initial_transmittance=None):
    """Composite packed samples. Returns ``(rgb (n, 3), RaySegmentSamples)``.

    Samples whose transmittance has fallen below ``TERMINATION_T`` are not
    composited; ``t_end`` is the transmittance where compositing stopped.
    ``initial_transmittance`` (per ray) continues rays rendered in pieces.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    n_rays = len(offsets) - 1
    sigma = np.asarray(sigma)
    color = np.asarray(color).reshape(-1, 3)
    dtype = np.result_type(sigma.dtype, color.dtype, np.float32)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), sigma.shape)
    ray_index = np.repeat(np.arange(n_rays), np.diff(offsets))
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    tau = sigma.astype(np.float64) * delta
    trans = np.exp(-_exclusive_segment_cumsum(tau, offsets))
    t0 = np.ones(n_rays)
    if initial_transmittance is not None:
        t0 = np.asarray(initial_transmittance, dtype=np.float64).reshape(n_rays)
        trans *= t0[ray_index]
    kept = trans >= TERMINATION_T if early_termination else np.ones(len(trans), bool)
    alpha = -np.expm1(-tau)
    weight = np.where(kept, trans * alpha, 0.0)
    t_end = t0 * np.exp(-_segment_sum(np.where(kept, tau, 0.0), ray_index, n_rays))
    rgb = _segment_sum(weight[:, None] * color, ray_index, n_rays) + t_end[:, None] * bg
    samples = RaySegmentSamples(ray_index, offsets, sigma, color, delta, trans, weight,
                                kept, t_end, bg)
    return rgb.astype(dtype), samples


def render_ray(sigma, color, delta, background=(0.0, 0.0, 0.0), early_termination=True):
    """Single-ray convenience wrapper around :func:`render_rays`."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    rgb, samples = render_rays(sigma, np.asarray(color).reshape(-1, 3), delta,
                               [0, len(sigma)], background, early_termination)
    return rgb[0], samples


def render_rays_backward(samples: RaySegmentSamples, d_rgb):
    """Gradients of a loss w.r.t. per-sample density and color.

    With ``S_i`` the color composited behind sample ``i`` (including the
    background term), ``dC/dtau_i = T_{i+1} c_i - S_i``.
    """
    d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(samples.n_rays, 3)
    g = d_rgb[samples.ray_index]  # (N, 3)
    d_color = samples.weight[:, None] * g
    wc = samples.weight[:, None] * samples.color.astype(np.float64)
    behind = _exclusive_segment_cumsum(wc, samples.offsets, reverse=True) \
        + samples.t_end[samples.ray_index, None] * samples.background
    tau = samples.sigma.astype(np.float64) * samples.delta
    t_next = samples.trans * np.exp(-tau)
    d_tau = np.sum(g * (t_next[:, None] * samples.color - behind), axis=1)
    d_tau = np.where(samples.kept, d_tau, 0.0)
    d_sigma = d_tau * samples.delta
    return d_sigma, d_color


# -- density activation ------------------------------------------------------

@dataclass
class DensityScaleConfig:
    scale: float = 100.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale >= 1):
            raise ConfigError("density scale must be finite and >= 1")


def scaled_density(raw, cfg: DensityScaleConfig | float = 1.0):
    """``sigma = s * exp(clamp(raw, -15, 15))``."""
    s = cfg.scale if isinstance(cfg, DensityScaleConfig) else float(cfg)
    raw = np.asarray(raw)
    return s * np.exp(np.clip(raw, -EXP_CLAMP, EXP_CLAMP))


def scaled_density_backward(raw, sigma, d_sigma):
    raw = np.asarray(raw)
    inside = (raw > -EXP_CLAMP) & (raw < EXP_CLAMP)
    return np.where(inside, sigma * d_sigma, 0.0)


def render_chunked(rays: RayBatch, field_fn, grid: Optional[OccupancyGrid], step: float,
                   background=(0.0, 0.0, 0.0), phase=None, early_termination=True,
                   chunk_steps: int = 32, k_max: int = K_MAX):
    """Forward-only rendering that marches in chunks of ``chunk_steps`` steps.

    ``field_fn(positions, directions) -> (sigma, rgb)``. Rays stop being
    marched once their transmittance drops below the termination threshold,
    which gives the same colors as compositing all samples at once.
    Returns ``(rgb, weight_sum, t_end, n_samples_per_ray)``.
    """
    n = len(rays)
    acc = np.zeros((n, 3))
    wsum = np.zeros(n)
    trans = np.ones(n)
    used = np.zeros(n, dtype=np.int64)
    if phase is None:
        phase = 0.5 * step
    phase = np.broadcast_to(np.asarray(phase, dtype=np.float64), (n,))
    active = np.flatnonzero(rays.valid)
    total = max_steps(rays, step)
    for k0 in range(0, total, chunk_steps):
        if not len(active):
            break
        part = rays.subset(active)
        m = march_rays(part, grid, step, phase[active], k_max=k_max,
                       k_range=(k0, min(k0 + chunk_steps, total)))
        if m.n_samples:
            room = np.maximum(k_max - used[active], 0)
            keep = np.arange(m.n_samples) - m.offsets[m.ray_index] < room[m.ray_index]
            idx = np.flatnonzero(keep)
            counts = np.bincount(m.ray_index[idx], minlength=len(active))
            offs = np.zeros(len(active) + 1, np.int64)
            np.cumsum(counts, out=offs[1:])
            sigma, rgb = field_fn(m.positions[idx], part.directions[m.ray_index[idx]])
            col, s = render_rays(sigma, rgb, step, offs, (0.0, 0.0, 0.0), early_termination,
                                 initial_transmittance=trans[active])
            acc[active] += col
            wsum[active] += np.bincount(s.ray_index, weights=s.weight, minlength=len(active))
            trans[active] = s.t_end
            used[active] += np.bincount(s.ray_index, weights=s.kept,
                                        minlength=len(active)).astype(np.int64)
        if early_termination:
            active = active[trans[active] >= TERMINATION_T]
        active = active[used[active] < k_max]
    rgb = acc + trans[:, None] * np.asarray(background, dtype=np.float64)
    return rgb, wsum, trans, used
