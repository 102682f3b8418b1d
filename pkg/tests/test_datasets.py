import json
import math

import numpy as np
import pytest
from PIL import Image

from occprior.datasets import (DatasetError, build_procedural_dataset, camera_ring,
                               composite_field, dataset_from_manifest, load_transforms,
                               make_procedural_scene, render_ground_truth, sample_prior_cloud,
                               write_scene_manifest)
from occprior.occupancy import OccupancyGrid, PointCloud, SplatConfig, grid_iou, splat
from occprior.ply import PlyError, load_ply, write_ply
from occprior.render import CameraModel, default_step, generate_rays, look_at


def write_scene(root, frames, angle=math.pi / 2, size=100, alpha=False):
    root.mkdir(exist_ok=True)
    meta = {"camera_angle_x": angle, "frames": []}
    for k, mat in enumerate(frames):
        name = f"./r_{k}"
        meta["frames"].append({"file_path": name, "transform_matrix": mat})
        mode = "RGBA" if alpha else "RGB"
        arr = np.full((size, size, 4 if alpha else 3), 200, np.uint8)
        if alpha:
            arr[..., 3] = 255
            arr[0, 0] = (10, 20, 30, 0)
        Image.fromarray(arr, mode).save(root / f"r_{k}.png")
    (root / "transforms_train.json").write_text(json.dumps(meta))
    return root


def test_transforms_focal(tmp_path):
    ds = load_transforms(write_scene(tmp_path / "s", [np.eye(4).tolist()]))
    assert ds.cameras[0].focal == pytest.approx(50 / math.tan(math.pi / 4))
    assert ds.images.shape == (1, 100, 100, 3)
    assert ds.bbox_min == (-1.5, -1.5, -1.5)


def test_transforms_missing_image_named(tmp_path):
    root = write_scene(tmp_path / "s", [np.eye(4).tolist()])
    (root / "r_0.png").unlink()
    with pytest.raises(DatasetError, match="r_0"):
        load_transforms(root)


def test_transforms_alpha_composited(tmp_path):
    ds = load_transforms(write_scene(tmp_path / "s", [np.eye(4).tolist()], alpha=True))
    np.testing.assert_array_equal(ds.images[0, 0, 0], [1, 1, 1])
    np.testing.assert_allclose(ds.images[0, 5, 5], 200 / 255)


def test_transforms_errors(tmp_path):
    root = write_scene(tmp_path / "s", [np.eye(4).tolist()])
    (root / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_transforms(root)
    bad = np.eye(4).tolist()
    bad[0][0] = float("nan")
    root = write_scene(tmp_path / "t", [bad])
    with pytest.raises(DatasetError, match="r_0"):
        load_transforms(root)
    (tmp_path / "t" / "r_0.png").write_bytes(b"garbage")
    meta = json.loads((tmp_path / "t" / "transforms_train.json").read_text())
    meta["frames"][0]["transform_matrix"] = np.eye(4).tolist()
    (tmp_path / "t" / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="decode"):
        load_transforms(root)
    with pytest.raises(DatasetError):
        load_transforms(tmp_path / "nowhere")


def test_transforms_deterministic_and_downscaled(tmp_path):
    root = write_scene(tmp_path / "s", [np.eye(4).tolist(), np.eye(4).tolist()], size=40)
    a, b = load_transforms(root, downscale=4), load_transforms(root, downscale=4)
    assert a.images.shape == (2, 10, 10, 3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.cameras[0].focal == pytest.approx(5.0)


ASCII_PLY = b"""ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
property float confidence
element face 0
property list uchar int vertex_indices
end_header
0.5 -1.25 2
1 2 3 0.9
-0.125 0 7.5 0.1
"""


def test_ply_ascii_fixture(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(ASCII_PLY.replace(b"0.5 -1.25 2\n", b"0.5 -1.25 2 0.3\n"))
    c = load_ply(p)
    np.testing.assert_array_equal(c.points, [[0.5, -1.25, 2], [1, 2, 3], [-0.125, 0, 7.5]])
    assert c.colors is None and c.source == "ply-file"


def test_ply_binary_colors(tmp_path):
    p = tmp_path / "b.ply"
    head = (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\n"
            b"property double y\nproperty double z\nproperty uchar red\nproperty uchar green\n"
            b"property uchar blue\nend_header\n")
    rec = np.array([(1.0, 2.0, 3.0, 128, 0, 255), (0.0, 0.0, -1.0, 1, 2, 3)],
                   dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("r", "u1"), ("g", "u1"),
                          ("b", "u1")])
    p.write_bytes(head + rec.tobytes())
    c = load_ply(p)
    np.testing.assert_array_equal(c.colors[0], [128 / 255, 0, 1])
    np.testing.assert_array_equal(c.points[1], [0, 0, -1])


@pytest.mark.parametrize("binary", [True, False])
@pytest.mark.parametrize("double", [True, False])
def test_ply_roundtrip(tmp_path, binary, double):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10**4 if binary else 500, 3))
    if not double:
        pts = pts.astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, (len(pts), 3)) / 255.0
    p = tmp_path / "r.ply"
    write_ply(p, PointCloud(pts, cols), binary=binary, double=double)
    back = load_ply(p)
    assert np.array_equal(back.points, pts)
    assert np.array_equal(back.colors, cols)


def test_ply_errors(tmp_path):
    p = tmp_path / "t.ply"
    write_ply(p, PointCloud(np.ones((10, 3))))
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(PlyError, match="byte offset"):
        load_ply(p)
    p.write_bytes(ASCII_PLY.replace(b"-0.125 0 7.5 0.1\n", b"-0.125"))
    with pytest.raises(PlyError, match="byte offset"):
        load_ply(p)
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(PlyError, match="encoding"):
        load_ply(p)
    p.write_bytes(b"not a ply")
    with pytest.raises(PlyError):
        load_ply(p)


def test_sphere_density_definition():
    sc = make_procedural_scene("textured-sphere", 0)
    assert sc.density(np.zeros((1, 3)))[0] == 0
    assert sc.density(np.array([[0.5, 0, 0], [0, 0, -0.5]])).tolist() == [sc.sigma_max] * 2
    with pytest.raises(DatasetError):
        make_procedural_scene("teapot")


@pytest.mark.parametrize("scene_id", ["textured-sphere", "two-boxes", "torus"])
def test_scene_fields_bounded(scene_id):
    sc = make_procedural_scene(scene_id, 3)
    p = np.random.default_rng(1).uniform(-1, 1, (50_000, 3))
    d, a = sc.density(p), sc.albedo(p)
    assert np.all(d >= 0) and np.all(d <= sc.sigma_max) and np.any(d > 0)
    assert np.all((a >= 0) & (a <= 1))
    outside = np.any((p < sc.support_min) | (p > sc.support_max), axis=1)
    assert np.all(d[outside] == 0)


def test_shell_volume_fraction_monte_carlo():
    sc = make_procedural_scene("textured-sphere", 0)
    R = 64
    rng = np.random.default_rng(2)
    g = np.arange(R)
    ijk = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    pts = -1 + (ijk + rng.random(ijk.shape)) * 2 / R  # one jittered sample per cell
    frac = np.mean(sc.density(pts) > 0)
    analytic = 4 / 3 * np.pi * (0.525**3 - 0.475**3) / 8
    assert abs(frac / analytic - 1) < 0.05


def small_cam(eye, size=24, fov=30.0):
    focal = 0.5 * size / math.tan(math.radians(fov) / 2)
    return CameraModel(look_at(eye), focal, size, size)


def test_ground_truth_empty_view_is_background():
    sc = make_procedural_scene("textured-sphere", 0)
    cam = CameraModel(look_at((3, 0, 0), target=(3, 0, 5)), 10.0, 8, 8)
    img = render_ground_truth(sc, cam)
    assert np.all(img == 0)


def test_ground_truth_opaque_box_face_on():
    sc = make_procedural_scene("two-boxes", 0, opaque_interior=True)
    params = np.random.default_rng(0)
    centers = np.array([[-0.35, -0.2, 0.0], [0.35, 0.25, 0.05]]) + params.uniform(-0.05, 0.05, (2, 3))
    c = centers[0]
    cam = CameraModel(look_at((c[0], c[1], 3.0), target=c, up=(0, 1, 0)), 40.0, 9, 9)
    img = render_ground_truth(sc, cam)
    rays = generate_rays(cam, [[4, 4]], sc.bbox_min, sc.bbox_max)
    z_top = c[2] + 0.3
    hit = rays.origins[0] + (rays.origins[0, 2] - z_top) / -rays.directions[0, 2] * rays.directions[0]
    np.testing.assert_allclose(img[4, 4], sc.albedo(hit[None])[0], atol=1e-3)


def test_ground_truth_energy_and_convergence():
    sc = make_procedural_scene("textured-sphere", 0)
    cam = small_cam((0.0, -3.0, 0.4))
    step = default_step(sc.bbox_min, sc.bbox_max)
    img4, energy = render_ground_truth(sc, cam, return_energy=True)
    np.testing.assert_allclose(energy, 1.0, atol=1e-5)
    img2 = render_ground_truth(sc, cam, step=step / 2)
    assert np.abs(img4 - img2).max() < 1e-3


def test_ground_truth_deterministic():
    sc = make_procedural_scene("torus", 1)
    cam = small_cam((2.0, 1.0, 1.5), size=12)
    assert render_ground_truth(sc, cam).tobytes() == render_ground_truth(sc, cam).tobytes()


def test_prior_cloud_sampling():
    sc = make_procedural_scene("textured-sphere", 0)
    assert len(sample_prior_cloud(sc, 0)) == 0
    pc = sample_prior_cloud(sc, 2000, 1)
    assert len(pc) == 2000 and np.all(sc.density(pc.points) > 0)


def test_prior_cloud_splat_matches_analytic_grid():
    sc = make_procedural_scene("textured-sphere", 0)
    pc = sample_prior_cloud(sc, 10**5, 0)
    g = splat(pc, SplatConfig(1.0, 64))
    # analytic occupancy: cells that intersect the dense shell
    c, h = g.cell_centers(), g.cell_size / 2
    nearest = np.linalg.norm(np.clip(0.0, c - h, c + h), axis=1)
    farthest = np.linalg.norm(np.abs(c) + h, axis=1)
    truth = OccupancyGrid(64, g.bbox_min, g.bbox_max,
                          occupancy=(nearest <= 0.525) & (farthest >= 0.475))
    assert grid_iou(g, truth) > 0.9


def test_procedural_dataset_cache_and_manifest(tmp_path):
    kw = dict(n_train=2, n_test=1, size=16, cache_dir=tmp_path)
    a = build_procedural_dataset("torus", 0, **kw)
    assert len(list(tmp_path.glob("torus-*.npz"))) == 1
    b = build_procedural_dataset("torus", 0, **kw)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    write_scene_manifest(tmp_path / "m.json", a)
    c = dataset_from_manifest(tmp_path / "m.json")
    assert c.test.images.tobytes() == a.test.images.tobytes()
    assert c.manifest == a.manifest


def test_camera_ring_looks_at_origin():
    for cam in camera_ring(6, size=8):
        fwd = -cam.c2w[:, 2]
        np.testing.assert_allclose(fwd, -cam.c2w[:, 3] / np.linalg.norm(cam.c2w[:, 3]), atol=1e-12)


def test_composite_field_conservation():
    sc = make_procedural_scene("two-boxes", 2)
    cam = small_cam((2.5, -1.5, 1.0), size=20)
    rays = generate_rays(cam, cam.all_pixels(), sc.bbox_min, sc.bbox_max)
    _, wsum, t_end = composite_field(sc, rays, default_step(sc.bbox_min, sc.bbox_max))
    np.testing.assert_allclose(wsum + t_end, 1.0, atol=1e-5)
