"""Posed-image datasets: NeRF-Synthetic style folders and analytic procedural scenes."""

from __future__ import annotations

import hashlib
import inspect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .occupancy import PointCloud
from .render import (CameraModel, RayBatch, default_step, generate_rays, intersect_box,
                     look_at, render_chunked)

SCENE_IDS = ("textured-sphere", "two-boxes", "torus")


class DatasetError(RuntimeError):
    pass


@dataclass
class PosedImageSet:
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    cameras: list
    split: str
    bbox_min: tuple
    bbox_max: tuple
    background: tuple = (1.0, 1.0, 1.0)
    names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) == 0:
            raise DatasetError(f"split {self.split!r} has no images")
        if len(self.images) != len(self.cameras):
            raise DatasetError("one camera per image required")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:3]

    def rays(self) -> RayBatch:
        """Every pixel's ray with its target color, image-major."""
        batches = [generate_rays(cam, cam.all_pixels(), self.bbox_min, self.bbox_max)
                   for cam in self.cameras]
        out = RayBatch(*(np.concatenate([getattr(b, a) for b in batches])
                         for a in ("origins", "directions", "near", "far", "valid")))
        out.targets = self.images.reshape(-1, 3)
        return out

    def subset(self, idx) -> "PosedImageSet":
        idx = list(idx)
        return PosedImageSet(self.images[idx], [self.cameras[i] for i in idx], self.split,
                             self.bbox_min, self.bbox_max, self.background,
                             [self.names[i] for i in idx] if self.names else [])


# -- NeRF-Synthetic transforms folders ---------------------------------------

def _read_image(path: Path, background, downscale: int):
    try:
        with Image.open(path) as im:
            im.load()
            if downscale > 1:
                im = im.resize((im.width // downscale, im.height // downscale),
                               Image.Resampling.BOX)
            arr = np.asarray(im.convert("RGBA" if "A" in im.getbands() else "RGB"),
                             dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    if arr.shape[-1] == 4:
        a = arr[..., 3:]
        arr = arr[..., :3] * a + np.asarray(background, np.float32) * (1 - a)
    return arr


def load_transforms(path, split: str = "train", background=(1.0, 1.0, 1.0),
                    downscale: int = 1, bbox_scale: float = 1.0) -> PosedImageSet:
    """Load ``transforms_<split>.json`` (or ``transforms.json``) from a scene folder.

    Alpha is composited over ``background`` at load time. The box defaults to
    ``[-1.5, 1.5]**3`` times ``bbox_scale``.
    """
    root = Path(path)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        meta_path = root / "transforms.json"
    if not meta_path.exists():
        raise DatasetError(f"no transforms_{split}.json or transforms.json in {root}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {meta_path}: {exc}") from exc
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise DatasetError(f"{meta_path} lacks camera_angle_x or frames")
    images, cams, names = [], [], []
    for k, frame in enumerate(meta["frames"]):
        name = frame.get("file_path", f"<frame {k}>")
        try:
            mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"frame {name}: bad transform_matrix") from exc
        if mat.shape != (4, 4) or not np.isfinite(mat).all():
            raise DatasetError(f"frame {name}: transform_matrix must be a finite 4x4")
        img_path = root / name
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"frame {name}: missing image file {img_path}")
        img = _read_image(img_path, background, downscale)
        h, w = img.shape[:2]
        focal = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
        try:
            cam = CameraModel(mat[:3, :4], focal, w, h)
        except ValueError as exc:
            raise DatasetError(f"frame {name}: {exc}") from exc
        images.append(img)
        cams.append(cam)
        names.append(name)
    if images and any(im.shape != images[0].shape for im in images):
        raise DatasetError(f"{meta_path}: images differ in size")
    b = 1.5 * bbox_scale
    return PosedImageSet(np.stack(images) if images else np.zeros((0, 1, 1, 3)), cams, split,
                         (-b, -b, -b), (b, b, b), tuple(background), names)


# -- procedural scenes -------------------------------------------------------

@dataclass
class ProceduralScene:
    scene_id: str
    seed: int
    density: Callable[[np.ndarray], np.ndarray]
    albedo: Callable[[np.ndarray], np.ndarray]
    sigma_max: float
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    # region outside which density is zero; lets rendering skip empty space
    support_min: tuple = (-1.0, -1.0, -1.0)
    support_max: tuple = (1.0, 1.0, 1.0)
    background: tuple = (0.0, 0.0, 0.0)
    params: dict = field(default_factory=dict)


def _edge(depth, sigma_max, edge):
    # density from the signed depth inside the dense region: sigma_max beyond
    # ``edge``, a linear ramp to 0 at the boundary (keeps ground truth
    # step-converged), 0 outside
    if edge <= 0:
        return np.where(depth >= 0, sigma_max, 0.0)
    return sigma_max * np.clip(depth / edge, 0.0, 1.0)


def _sphere_scene(seed, sigma_max, edge, radius=0.5, thickness=0.05, checks=2):
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 2)
    half = thickness / 2

    def density(p):
        r = np.linalg.norm(p, axis=-1)
        return _edge(half - np.abs(r - radius), sigma_max, edge)

    def albedo(p):
        r = np.maximum(np.linalg.norm(p, axis=-1), 1e-9)
        polar = np.arccos(np.clip(p[..., 2] / r, -1, 1))
        azim = np.arctan2(p[..., 1], p[..., 0])
        s = np.sin(checks * azim + phase[0]) * np.sin(checks * polar + phase[1])
        return np.stack([0.5 + 0.35 * s, 0.45 - 0.3 * s, 0.35 + 0.15 * np.cos(polar)], -1)

    m = radius + half
    return density, albedo, (-m,) * 3, (m,) * 3


def _boxes_scene(seed, sigma_max, edge, opaque_interior=False, wall=0.05):
    rng = np.random.default_rng(seed)
    centers = np.array([[-0.35, -0.2, 0.0], [0.35, 0.25, 0.05]]) + rng.uniform(-0.05, 0.05, (2, 3))
    halves = np.array([[0.25, 0.3, 0.3], [0.2, 0.2, 0.35]])
    colors = np.array([[0.8, 0.3, 0.2], [0.2, 0.5, 0.8]])

    def density(p):
        out = np.zeros(p.shape[:-1])
        for k in range(2):
            depth = np.min(halves[k] - np.abs(p - centers[k]), axis=-1)
            if not opaque_interior:
                depth = np.minimum(depth, wall - depth)
            out = np.maximum(out, _edge(depth, sigma_max, edge))
        return out

    def albedo(p):
        d0 = np.max(np.abs(p - centers[0]) / halves[0], axis=-1)
        d1 = np.max(np.abs(p - centers[1]) / halves[1], axis=-1)
        pick = (d0 <= d1)[..., None]
        tint = 0.1 * np.sin(6 * p[..., :1]) * np.cos(6 * p[..., 1:2])
        return np.clip(np.where(pick, colors[0], colors[1]) + tint, 0, 1)

    lo = np.min(centers - halves, axis=0)
    hi = np.max(centers + halves, axis=0)
    return density, albedo, tuple(lo), tuple(hi)


def _torus_scene(seed, sigma_max, edge, major=0.5, minor=0.15):
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)

    def density(p):
        q = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - major
        return _edge(minor - np.sqrt(q**2 + p[..., 2] ** 2), sigma_max, edge)

    def albedo(p):
        azim = np.arctan2(p[..., 1], p[..., 0])
        s = np.sin(5 * azim + phase)
        return np.stack([0.6 + 0.3 * s, 0.5 + 0.2 * np.cos(3 * azim), 0.4 - 0.25 * s], -1)

    m = major + minor
    return density, albedo, (-m, -m, -minor), (m, m, minor)


def make_procedural_scene(scene_id: str, seed: int = 0, sigma_max: float = 200.0,
                          edge: float = 0.005, **options) -> ProceduralScene:
    """Closed-form density and albedo fields inside ``[-1, 1]**3``.

    Density is ``sigma_max`` inside the solid except for a linear ramp of
    width ``edge`` at its boundary.
    """
    builders = {"textured-sphere": _sphere_scene, "two-boxes": _boxes_scene,
                "torus": _torus_scene}
    if scene_id not in builders:
        raise DatasetError(f"unknown procedural scene {scene_id!r}; choose from {SCENE_IDS}")
    build = builders[scene_id]
    # record every shape parameter, defaults included, so manifests are complete
    params = {k: v.default for k, v in inspect.signature(build).parameters.items()
              if v.default is not inspect.Parameter.empty}
    params.update(options, sigma_max=sigma_max, edge=edge)
    density, albedo, smin, smax = build(seed, sigma_max, edge, **options)
    return ProceduralScene(scene_id, seed, density, albedo, sigma_max,
                           support_min=smin, support_max=smax, params=params)


def composite_field(scene: ProceduralScene, rays: RayBatch, step: float,
                    early_termination=True):
    """Render analytic fields along rays; returns ``(rgb, weight_sum, t_end)``."""
    near, far, hit = intersect_box(rays.origins, rays.directions, scene.support_min,
                                   scene.support_max)
    # keep the step lattice anchored at the scene-box entry so results do not
    # depend on the support box
    k_first = np.where(hit, np.floor((near - rays.near) / step), 0)
    clipped = RayBatch(rays.origins, rays.directions, rays.near + k_first * step,
                       np.minimum(far, rays.far), hit & rays.valid)
    fields = lambda p, d: (scene.density(p), scene.albedo(p))  # noqa: E731
    rgb, wsum, t_end, _ = render_chunked(clipped, fields, None, step, scene.background,
                                         early_termination=early_termination)
    return rgb, wsum, t_end


def render_ground_truth(scene: ProceduralScene, camera: CameraModel, step=None,
                        return_energy=False):
    """Reference image of an analytic scene (default step: box diagonal / 4096)."""
    if step is None:
        step = default_step(scene.bbox_min, scene.bbox_max) / 4
    rays = generate_rays(camera, camera.all_pixels(), scene.bbox_min, scene.bbox_max)
    rgb, wsum, t_end = composite_field(scene, rays, step)
    img = rgb.reshape(camera.height, camera.width, 3).astype(np.float32)
    if return_energy:
        return img, (wsum + t_end).reshape(camera.height, camera.width)
    return img


def sample_prior_cloud(scene: ProceduralScene, n: int, seed: int = 0,
                       min_fraction: float = 0.5, batch: int = 1 << 20) -> PointCloud:
    """``n`` points uniform over the region where density exceeds ``min_fraction * sigma_max``."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(scene.support_min)
    hi = np.asarray(scene.support_max)
    got, total = [], 0
    tries = 0
    while total < n:
        cand = rng.uniform(lo, hi, (batch, 3))
        ok = cand[scene.density(cand) > min_fraction * scene.sigma_max]
        got.append(ok)
        total += len(ok)
        tries += 1
        if tries > 1000 and total == 0:
            raise DatasetError("rejection sampling found no dense region")
    pts = np.concatenate(got)[:n] if got else np.zeros((0, 3))
    return PointCloud(pts, scene.albedo(pts) if len(pts) else None, source="synthetic")


def camera_ring(n_views: int, radius: float = 3.0, fov_deg: float = 30.0, size: int = 128,
                seed: int = 0, lattice: bool = True) -> list:
    """Cameras on a sphere around the origin looking at it.

    ``lattice`` places them on a Fibonacci lattice; otherwise directions are
    random (from ``seed``).
    """
    focal = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    if lattice:
        k = np.arange(n_views) + 0.5
        z = 1 - 2 * k / n_views
        phi = np.pi * (1 + 5**0.5) * k + seed
        dirs = np.stack([np.sqrt(1 - z**2) * np.cos(phi), np.sqrt(1 - z**2) * np.sin(phi), z], 1)
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_views, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return [CameraModel(look_at(radius * d), focal, size, size) for d in dirs]


@dataclass
class ProceduralDataset:
    scene: ProceduralScene
    train: PosedImageSet
    test: PosedImageSet
    manifest: dict


def build_procedural_dataset(scene_id: str, seed: int = 0, n_train: int = 32, n_test: int = 4,
                             size: int = 128, fov_deg: float = 30.0, radius: float = 3.0,
                             cache_dir=None, **scene_options) -> ProceduralDataset:
    """Render train and test views of a procedural scene.

    With ``cache_dir`` the rendered images are stored in an ``.npz`` keyed by
    the scene manifest and reused on the next call.
    """
    scene = make_procedural_scene(scene_id, seed, **scene_options)
    train_cams = camera_ring(n_train, radius, fov_deg, size)
    test_cams = camera_ring(n_test, radius, fov_deg, size, seed=1000 + seed, lattice=False)
    manifest = {
        "scene": scene_id, "seed": seed, "bbox": [list(scene.bbox_min), list(scene.bbox_max)],
        "scene_params": scene.params,
        "cameras": {"n_train": n_train, "n_test": n_test, "radius": radius,
                    "fov_deg": fov_deg, "size": size, "train_layout": "fibonacci",
                    "test_layout": f"random(seed={1000 + seed})"},
    }
    cache = None
    if cache_dir is not None:
        key = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:16]
        cache = Path(cache_dir) / f"{scene_id}-{key}.npz"
    if cache is not None and cache.exists():
        with np.load(cache) as z:
            images = {"train": z["train"], "test": z["test"]}
    else:
        images = {split: np.stack([render_ground_truth(scene, c) for c in cams])
                  for split, cams in (("train", train_cams), ("test", test_cams))}
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache.with_suffix(".tmp.npz")
            np.savez(tmp, **images)
            tmp.replace(cache)

    def image_set(cams, split):
        return PosedImageSet(images[split], cams, split, scene.bbox_min, scene.bbox_max,
                             scene.background, [f"{split}_{i:03d}" for i in range(len(cams))])

    return ProceduralDataset(scene, image_set(train_cams, "train"),
                             image_set(test_cams, "test"), manifest)


def write_scene_manifest(path, dataset: ProceduralDataset):
    Path(path).write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True))


def dataset_from_manifest(path_or_dict, cache_dir=None) -> ProceduralDataset:
    m = path_or_dict
    if not isinstance(m, dict):
        m = json.loads(Path(path_or_dict).read_text())
    cams = m["cameras"]
    return build_procedural_dataset(m["scene"], m["seed"], cams["n_train"], cams["n_test"],
                                    cams["size"], cams["fov_deg"], cams["radius"],
                                    cache_dir=cache_dir, **m["scene_params"])
