import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pixpoint.data import (CorrespondenceSet, DepthImage, Fragment, KdTree, PipelineConfig, PointCloud,
                           augment_noise, fuse_frames, grid_subsample, kd_query, label_correspondences,
                           radius_neighbors, read_depth_bin, read_image_png, read_pairs_csv, read_ply,
                           standardize_image, write_depth_bin, write_image_png, write_pairs_csv, write_ply)
from pixpoint.errors import InvalidInputError
from pixpoint.geometry import CameraIntrinsics, RigidTransform, look_at, random_rotation

K = CameraIntrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)


def test_kd_single_point_and_exact_hit():
    t = KdTree([[1.0, 2.0, 3.0]])
    d, i = kd_query(t, [9.0, 9.0, 9.0], 1)
    assert i[0] == 0
    pts = np.random.default_rng(0).normal(size=(50, 3))
    d, i = KdTree(pts).query(pts[17], 3)
    assert i[0] == 17 and d[0] == 0.0


def test_kd_rejects_large_k():
    with pytest.raises(InvalidInputError):
        KdTree(np.zeros((3, 3))).query(np.zeros(3), 4)


def test_kd_matches_brute_force():
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(1000, 3))
    tree = KdTree(pts)
    Q = rng.uniform(size=(100, 3))
    D, I = tree.query_many(Q, 5)
    for q, d, i in zip(Q, D, I):
        od, oi = oracles.knn(pts, q, 5)
        assert list(i) == oi
        np.testing.assert_allclose(d, od, atol=1e-15)


def test_kd_ties_go_to_lower_index():
    # a lattice has many exactly equidistant neighbours
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    perm = np.random.default_rng(2).permutation(len(g))
    pts = g[perm]
    tree = KdTree(pts)
    for q in [[1.5, 1.5, 1.5], [1.0, 1.0, 1.5], [0.5, 0.5, 0.5]]:
        for k in (1, 4, 9):
            _, oi = oracles.knn(pts, q, k)
            assert list(tree.query(q, k)[1]) == oi
            assert list(tree.query_many([q], k)[1][0]) == oi


def test_kd_radius_query():
    rng = np.random.default_rng(3)
    pts = rng.uniform(size=(300, 3))
    q = np.array([0.5, 0.5, 0.5])
    d, i = KdTree(pts).query_radius(q, 0.2)
    brute = [j for j in range(300) if np.linalg.norm(pts[j] - q) <= 0.2]
    assert sorted(i.tolist()) == brute
    assert np.all(np.diff(d) >= 0)


def test_radius_neighbors_vs_brute():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 0.2, size=(200, 3))
    idx, mask = radius_neighbors(pts, 0.05, 10)
    for z in range(len(pts)):
        _, oi = oracles.knn(pts, pts[z], 200)
        inside = [j for j in oi if np.linalg.norm(pts[j] - pts[z]) <= 0.05][:10]
        assert idx[z, mask[z]].tolist() == inside
        assert idx[z, 0] == z
        assert np.all(idx[z, ~mask[z]] == z)


def test_fuse_single_pixel():
    k = CameraIntrinsics(20.0, 20.0, 7.0, 5.0, 16, 12)
    d = np.zeros((12, 16))
    d[5, 7] = 1.0
    cloud = fuse_frames([(DepthImage(d), np.zeros((12, 16, 3)), RigidTransform.identity(), k)])
    np.testing.assert_allclose(cloud.points, [[0, 0, 1]])


def test_fuse_counts_and_empty():
    rng = np.random.default_rng(5)
    frames = []
    total = 0
    for _ in range(5):
        d = rng.uniform(0.5, 2, size=(12, 16))
        d[rng.random((12, 16)) < 0.3] = 0
        total += int((d > 0).sum())
        pose = RigidTransform(random_rotation(rng), rng.normal(size=3))
        frames.append((DepthImage(d), rng.random((12, 16, 3)), pose, K))
    assert len(fuse_frames(frames)) == total
    assert len(fuse_frames(frames[:1] * 2)) == 2 * len(fuse_frames(frames[:1]))
    with pytest.raises(InvalidInputError):
        fuse_frames([])


def test_grid_subsample_simple():
    pts = np.array([[0.001, 0.002, 0.003], [0.004, 0.001, 0.0]])
    out = grid_subsample(PointCloud(pts), 0.015)
    np.testing.assert_allclose(out.points, [pts.mean(0)])
    assert len(grid_subsample(PointCloud(np.zeros((0, 3))), 0.015)) == 0


def test_grid_subsample_vs_hash_oracle():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-0.1, 0.1, size=(2000, 3))
    cols = rng.random((2000, 3))
    out = grid_subsample(PointCloud(pts, cols), 0.015)
    ref = oracles.voxel_means(pts, cols, 0.015)
    assert len(out) == len(ref)
    keys = [tuple(np.floor(p / 0.015).astype(int)) for p in out.points]
    assert len(set(keys)) == len(keys)
    for key, p, c in zip(keys, out.points, out.colors):
        np.testing.assert_allclose(p, ref[key][0], atol=1e-12)
        np.testing.assert_allclose(c, ref[key][1], atol=1e-12)


def _scene_frame(rng):
    pose = look_at([0.0, 0.0, 0.0], [0.02, -0.01, 1.0])
    d = rng.uniform(0.8, 1.2, size=(K.height, K.width))
    d[rng.random(d.shape) < 0.2] = 0
    return DepthImage(d), pose


def test_label_exact_and_threshold():
    k = CameraIntrinsics(20.0, 20.0, 7.0, 5.0, 16, 12)
    d = np.zeros((12, 16))
    d[5, 7] = 1.0
    d[2, 3] = 1.0
    target = np.array([[0.0, 0.0, 1.0]])
    far = np.array([[(3 - 7) / 20.0 + 0.02, (2 - 5) / 20.0, 1.0]])
    cloud = PointCloud(np.concatenate([target, far]))
    cfg = PipelineConfig(min_correspondences=1)
    c = label_correspondences(DepthImage(d), k, RigidTransform.identity(), cloud, cfg)
    assert c.pixel_idx.tolist() == [5 * 16 + 7]
    assert c.point_idx.tolist() == [0]
    assert c.distance[0] == 0.0


def test_label_vs_exhaustive_scan():
    rng = np.random.default_rng(7)
    depth, pose = _scene_frame(rng)
    base = fuse_frames([(depth, None, pose, K)])
    # jitter plus extra points outside the frustum
    pts = np.concatenate([base.points + rng.normal(0, 0.01, base.points.shape),
                          rng.uniform(-3, 3, size=(300, 3))])
    cloud = PointCloud(pts)
    cfg = PipelineConfig()
    got = label_correspondences(depth, K, pose, cloud, cfg)
    ref = oracles.label_pairs(depth.depths, depth.valid, K, pose, pts, cfg.eta)
    assert got.pixel_idx.tolist() == [r[0] for r in ref]
    assert got.point_idx.tolist() == [r[1] for r in ref]
    np.testing.assert_allclose(got.distance, [r[2] for r in ref], atol=1e-12)
    assert np.all(got.distance < cfg.eta)
    assert np.all(depth.valid.ravel()[got.pixel_idx])
    assert got.usable == (len(got) >= 128)


def test_label_unusable_flag():
    rng = np.random.default_rng(8)
    depth, pose = _scene_frame(rng)
    cloud = PointCloud(rng.uniform(10, 11, size=(50, 3)))
    c = label_correspondences(depth, K, pose, cloud)
    assert len(c) == 0 and not c.usable


def test_correspondence_set_rejects_duplicates():
    with pytest.raises(InvalidInputError):
        CorrespondenceSet([1, 1], [0, 2])
    CorrespondenceSet([1, 1], [0, 2], kind="predicted")


def test_noise():
    rng = np.random.default_rng(9)
    cloud = PointCloud(rng.normal(size=(100000, 3)))
    same = augment_noise(cloud, 0.0, 1)
    np.testing.assert_array_equal(same.points, cloud.points)
    a = augment_noise(cloud, 0.005, 42)
    b = augment_noise(cloud, 0.005, 42)
    assert a.points.tobytes() == b.points.tobytes()
    std = (a.points - cloud.points).std()
    assert abs(std - 0.005) / 0.005 < 0.02
    assert len(a) == len(cloud)


def test_standardize():
    z, deg = standardize_image(np.full((4, 4, 3), 0.3))
    assert deg and not z.any()
    z, deg = standardize_image(np.array([[0.0, 2.0], [2.0, 0.0]]))
    np.testing.assert_allclose(z, [[-1, 1], [1, -1]])
    assert not deg


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_standardize_statistics(seed, scale):
    x = np.random.default_rng(seed).random((9, 7, 3)) * scale + 5
    z, deg = standardize_image(x)
    assert not deg
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6


def test_file_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    cloud = PointCloud(rng.normal(size=(40, 3)).astype(np.float32).astype(np.float64),
                       np.round(rng.random((40, 3)) * 255) / 255)
    write_ply(tmp_path / "c.ply", cloud)
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_allclose(back.colors, cloud.colors, atol=1e-12)

    d = rng.uniform(0, 2, size=(12, 16)).astype(np.float32)
    write_depth_bin(tmp_path / "d.bin", d)
    np.testing.assert_array_equal(read_depth_bin(tmp_path / "d.bin", 16, 12).depths, d)

    img = np.round(rng.random((12, 16, 3)) * 255) / 255
    write_image_png(tmp_path / "i.png", img)
    np.testing.assert_allclose(read_image_png(tmp_path / "i.png"), img, atol=1e-12)

    c = CorrespondenceSet([3, 9, 11], [0, 5, 2], [0.001, 0.0, 0.01])
    write_pairs_csv(tmp_path / "p.csv", c)
    c2 = read_pairs_csv(tmp_path / "p.csv")
    assert c2.pixel_idx.tolist() == [3, 9, 11] and c2.point_idx.tolist() == [0, 5, 2]
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "pixel_index,point_index,distance"


def test_fragment_missing_files(tmp_path):
    (tmp_path / "frag").mkdir()
    with pytest.raises(FileNotFoundError, match="cloud.ply"):
        Fragment.load(tmp_path / "frag")
