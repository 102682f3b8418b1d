import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occprior.occupancy import (GridUpdateConfig, OccupancyGrid, PointCloud, SplatConfig,
                                cell_index, degrade_prior, grid_iou, load_grid, occupied,
                                save_grid, splat, update_grid)
from occprior.tensor import ConfigError, UsageError

BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def scfg(R=16, r=1.0):
    return SplatConfig(radius=r, resolution=R, bbox_min=BOX[0], bbox_max=BOX[1])


def brute_splat(points, R, r):
    # every cell, every point: contains it, or center within r cell widths
    g = np.arange(R)
    ijk = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    flat = ijk[:, 0] + R * (ijk[:, 1] + R * ijk[:, 2])
    centers = ijk + 0.5
    uvw = (np.asarray(points) + 1) / 2 * R
    out = np.zeros(R**3, bool)
    for p in uvw:
        d = np.sqrt(np.sum((centers - p) ** 2, axis=1))
        home = np.all(np.minimum(np.floor(p), R - 1) == ijk, axis=1)
        out[flat[(d <= r) | home]] = True
    return out


def cloud(pts):
    return PointCloud(np.asarray(pts, float))


def center_of(cell, R):
    return -1 + (np.asarray(cell) + 0.5) * 2 / R


def test_empty_cloud_empty_grid():
    g = splat(PointCloud.empty(), scfg())
    assert g.n_occupied == 0 and not g.prior.any()


def test_zero_radius_marks_containing_cell():
    g = splat(cloud([center_of((5, 5, 5), 16)]), scfg(r=0.0))
    assert np.flatnonzero(g.occupancy).tolist() == [5 + 16 * (5 + 16 * 5)]


def test_unit_radius_marks_seven_cells():
    g = splat(cloud([center_of((5, 5, 5), 16)]), scfg(r=1.0))
    assert g.n_occupied == 7
    assert np.array_equal(g.occupancy, brute_splat([center_of((5, 5, 5), 16)], 16, 1.0))
    np.testing.assert_array_equal(g.prior, g.occupancy)


def test_random_cloud_matches_brute_force():
    pts = np.random.default_rng(0).uniform(-1, 1, (10**4, 3))
    g = splat(cloud(pts), scfg(r=1.5))
    assert np.array_equal(g.occupancy, brute_splat(pts, 16, 1.5))


def test_outside_points_dropped_and_counted():
    g = splat(cloud([[0, 0, 0], [3, 0, 0], [0, -2, 0]]), scfg(r=0.0))
    assert g.dropped_points == 2 and g.n_occupied == 1


def test_degenerate_box_rejected():
    with pytest.raises(ConfigError):
        SplatConfig(bbox_min=(0, 0, 0), bbox_max=(1, 0, 1))
    with pytest.raises(ConfigError):
        SplatConfig(radius=-1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2), st.floats(0, 2))
def test_splat_monotone_in_radius(seed, r1, r2):
    r1, r2 = sorted((r1, r2))
    pts = cloud(np.random.default_rng(seed).uniform(-1, 1, (30, 3)))
    a, b = splat(pts, scfg(8, r1)), splat(pts, scfg(8, r2))
    assert not np.any(a.occupancy & ~b.occupancy)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2))
def test_splat_union(seed, r):
    rng = np.random.default_rng(seed)
    A, B = rng.uniform(-1, 1, (20, 3)), rng.uniform(-1, 1, (15, 3))
    ab = splat(cloud(np.concatenate([A, B])), scfg(8, r))
    assert np.array_equal(ab.occupancy, splat(cloud(A), scfg(8, r)).occupancy
                          | splat(cloud(B), scfg(8, r)).occupancy)


def test_zero_probe_empties_grid():
    g = OccupancyGrid.full(8, *BOX)
    g.density[:] = 50.0
    cfg = GridUpdateConfig(min_uniform_samples=512)
    for k in range(60):
        update_grid(g, lambda p: np.zeros(len(p)), cfg, k)
    assert g.n_occupied == 0


def test_zero_probe_keeps_prior_cell():
    g = OccupancyGrid(8, *BOX)
    g.prior[123] = g.occupancy[123] = True
    for k in range(200):
        update_grid(g, lambda p: np.zeros(len(p)), GridUpdateConfig(), k)
        assert g.occupancy[123]
    assert g.n_occupied == 1


def test_ball_probe_converges_to_ball_cells():
    R, tau, rad = 16, 10.0, 0.5
    g = OccupancyGrid.full(R, *BOX)
    probe = lambda p: np.where(np.linalg.norm(p, axis=1) < rad, 2 * tau, 0.0)
    cfg = GridUpdateConfig(threshold=tau, min_uniform_samples=R**3)
    for k in range(80):
        update_grid(g, probe, cfg, k)
    # analytic oracle on cell corners: fully inside cells must be kept,
    # fully outside cells must be dropped, straddling cells may go either way
    centers = g.cell_centers()
    half = g.cell_size / 2
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    d = np.linalg.norm(centers[:, None, :] + corners * half, axis=2)
    inside, outside = np.all(d < rad, axis=1), np.all(d >= rad, axis=1)
    nearest = np.linalg.norm(np.clip(np.zeros(3), centers - half, centers + half), axis=1)
    outside |= nearest >= rad
    assert g.occupancy[inside].all()
    assert not g.occupancy[outside].any()


def test_update_cache_rule_and_report():
    g = OccupancyGrid.full(4, *BOX)
    g.density[:] = 20.0
    rep = update_grid(g, lambda p: np.full(len(p), 5.0), GridUpdateConfig(), 0)
    # every cell was occupied, hence sampled: cache = max(0.95 * 20, 5)
    np.testing.assert_allclose(g.density, 19.0)
    assert rep.removed == 0 and rep.added == 0 and g.n_occupied == 64
    rep = update_grid(g, lambda p: np.full(len(p), 5.0), GridUpdateConfig(threshold=18.5), 1)
    assert rep.removed == 64 and g.n_occupied == 0


def test_mean_capped_threshold():
    g = OccupancyGrid.full(4, *BOX)
    probe = lambda p: np.where(p[:, 0] > 0, 2.0, 0.5)
    rep = update_grid(g, probe, GridUpdateConfig(mean_capped=True), 0)
    assert rep.threshold == pytest.approx(1.25)
    assert g.n_occupied == 32


def test_probe_shape_checked():
    g = OccupancyGrid.full(4, *BOX)
    with pytest.raises(UsageError):
        update_grid(g, lambda p: np.zeros(3), GridUpdateConfig(), 0)


def test_update_config_validation():
    for bad in (dict(threshold=0), dict(decay=1.0), dict(decay=0.0), dict(period=0)):
        with pytest.raises(ConfigError):
            GridUpdateConfig(**bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_locked_union_monotone(seed, rounds):
    rng = np.random.default_rng(seed)
    g = OccupancyGrid(8, *BOX)
    g.prior[rng.random(512) < 0.1] = True
    g.occupancy |= g.prior
    prior = g.prior.copy()
    for k in range(rounds):
        scale = rng.uniform(0, 40)
        probe = lambda p, s=scale, f=rng.normal(size=3): s * np.abs(np.sin(p @ f * 5))
        update_grid(g, probe, GridUpdateConfig(threshold=rng.uniform(0.1, 30),
                                               mean_capped=bool(rng.integers(2))), rng)
        assert np.all(g.occupancy[prior]) and np.array_equal(g.prior, prior)
        g.check_invariants()


def test_fixed_probe_reaches_fixed_point():
    # a converged field looks like a thin dense shell over near-empty space
    R = 32
    g = OccupancyGrid.full(R, *BOX)
    probe = lambda p: np.where(np.abs(np.linalg.norm(p, axis=1) - 0.5) < 0.05, 200.0, 0.01)
    cfg = GridUpdateConfig(min_uniform_samples=R**3)
    for k in range(100):
        update_grid(g, probe, cfg, k)
    for k in range(100, 105):
        before = g.occupancy.copy()
        update_grid(g, probe, cfg, k)
        assert np.count_nonzero(before != g.occupancy) < 0.001 * g.n_cells


def grid_from(cells, R=4):
    g = OccupancyGrid(R, *BOX)
    g.occupancy[list(cells)] = True
    return g


def test_iou_examples():
    a = grid_from([1, 2])
    assert grid_iou(a, a.copy()) == 1.0
    assert grid_iou(a, grid_from([3, 4])) == 0.0
    assert grid_iou(a, grid_from([1, 2, 5, 6])) == 0.5
    assert grid_iou(grid_from([]), grid_from([])) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(UsageError):
        grid_iou(grid_from([1]), grid_from([1], R=8))


@settings(max_examples=50, deadline=None)
@given(st.sets(st.integers(0, 63)), st.sets(st.integers(0, 63)))
def test_iou_symmetry_identity(a, b):
    ga, gb = grid_from(a), grid_from(b)
    assert grid_iou(ga, gb) == grid_iou(gb, ga)
    assert 0.0 <= grid_iou(ga, gb) <= 1.0
    if a:
        assert grid_iou(ga, ga) == 1.0


def test_occupied_full_grid_and_corner():
    g = OccupancyGrid.full(8, *BOX)
    pts = np.random.default_rng(0).uniform(-1, 1, (100, 3))
    assert occupied(g, pts).all()
    e = OccupancyGrid(8, *BOX)
    e.occupancy[7 + 8 * (7 + 8 * 7)] = True
    assert occupied(e, np.array([1.0, 1.0, 1.0]))
    assert not occupied(e, np.array([0.99, -0.99, 0.99]))
    assert not occupied(g, np.array([1.01, 0.0, 0.0]))


def test_occupied_matches_index_oracle():
    R = 32
    rng = np.random.default_rng(1)
    g = OccupancyGrid(R, *BOX)
    g.occupancy[rng.random(R**3) < 0.4] = True
    pts = rng.uniform(-1, 1, (10**5, 3))
    got = occupied(g, pts)
    want = np.empty(len(pts), bool)
    for n, p in enumerate(pts):
        i, j, k = (min(int((c + 1) / 2 * R), R - 1) for c in p)
        want[n] = g.occupancy[i + R * j + R * R * k]
    assert np.array_equal(got, want)
    idx, inside = cell_index(g, pts)
    assert inside.all()


def test_degrade_identity_and_full_dropout():
    c = cloud(np.random.default_rng(2).uniform(-1, 1, (100, 3)))
    same = degrade_prior(c, 0.0, 0.0, 0.0, 1)
    assert np.array_equal(same.points, c.points)
    gone = degrade_prior(c, 0.0, 1.0, 0.1, 1)
    assert len(gone) == 10
    assert np.all(np.abs(gone.points) <= 1)


def test_degrade_dropout_binomial():
    n, p = 10**4, 0.5
    c = cloud(np.random.default_rng(3).uniform(-1, 1, (n, 3)))
    kept = len(degrade_prior(c, dropout_fraction=p, rng_seed=4))
    assert abs(kept - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_degrade_deterministic_and_validated():
    c = cloud(np.random.default_rng(5).uniform(-1, 1, (50, 3)))
    a = degrade_prior(c, 0.01, 0.3, 0.2, 9)
    b = degrade_prior(c, 0.01, 0.3, 0.2, 9)
    assert np.array_equal(a.points, b.points)
    with pytest.raises(ValueError):
        degrade_prior(c, dropout_fraction=1.5)


def test_grid_file_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(6)
    g = splat(cloud(rng.uniform(-1, 1, (40, 3))), scfg(5, 1.0))
    g.occupancy[rng.random(125) < 0.2] = True
    g.density[:] = rng.random(125).astype(np.float32)
    path = tmp_path / "g.ingo"
    save_grid(path, g)
    blob = path.read_bytes()
    nbytes = (125 + 7) // 8
    assert blob[:4] == b"INGO" and len(blob) == 36 + 2 * nbytes + 4 * 125
    # cell 0 is bit 0 of the first occupancy byte, x-fastest
    assert (blob[36] & 1) == int(g.occupancy[0])
    back = load_grid(path)
    assert np.array_equal(back.occupancy, g.occupancy)
    assert np.array_equal(back.prior, g.prior)
    assert np.array_equal(back.density, g.density)


def test_grid_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ingo"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        load_grid(path)
