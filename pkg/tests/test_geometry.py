import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixpoint.errors import InvalidInputError
from pixpoint.geometry import (CameraIntrinsics, RigidTransform, compose, in_frustum, invert, load_camera_json,
                               look_at, pixel_grid, project, random_rotation, rodrigues, rotation_angle,
                               save_camera_json, unproject)

K = CameraIntrinsics(60.0, 62.0, 31.5, 30.0, 64, 60)


def rand_T(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


def test_unproject_principal_ray():
    np.testing.assert_allclose(unproject((K.cx, K.cy), 1.0, K), [0, 0, 1])
    np.testing.assert_allclose(unproject((K.cx + K.fx, K.cy), 1.0, K), [1, 0, 1])


@pytest.mark.parametrize("d", [0.0, -1.0, np.nan])
def test_unproject_rejects_bad_depth(d):
    with pytest.raises(InvalidInputError):
        unproject((1.0, 2.0), d, K)


def test_project_basics():
    uv, behind = project(np.array([0.0, 0.0, 1.0]), K)
    np.testing.assert_allclose(uv, [K.cx, K.cy])
    assert not behind
    _, behind = project(np.array([0.0, 0.0, -1.0]), K)
    assert behind


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0, 63.99), v=st.floats(0, 59.99), d=st.floats(0.05, 50.0))
def test_project_unproject_round_trip(u, v, d):
    uv, behind = project(unproject((u, v), d, K), K)
    assert not behind
    assert np.max(np.abs(uv - [u, v])) < 1e-9


def test_transform_basics():
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(RigidTransform.identity().apply(x), x)
    np.testing.assert_allclose(RigidTransform(np.eye(3), [0, 0, 1]).apply(np.zeros(3)), [0, 0, 1])


def test_group_laws():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b, c = rand_T(rng), rand_T(rng), rand_T(rng)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(invert(a).apply(a.apply(x)), x, atol=1e-9)
        np.testing.assert_allclose(compose(a, invert(a)).matrix, np.eye(4), atol=1e-9)
        np.testing.assert_allclose(compose(invert(a), a).matrix, np.eye(4), atol=1e-9)
        lhs = compose(compose(a, b), c).matrix
        rhs = compose(a, compose(b, c)).matrix
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)
        np.testing.assert_allclose(compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-9)


def test_long_composition_stays_orthonormal():
    rng = np.random.default_rng(1)
    T = RigidTransform.identity()
    for _ in range(2000):
        T = compose(T, RigidTransform(rodrigues(rng.normal(scale=0.3, size=3)), rng.normal(size=3)))
    R = T.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_rejects_non_rotation():
    with pytest.raises(InvalidInputError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidInputError):
        RigidTransform(np.eye(3) * 1.001)


@pytest.mark.parametrize("args", [(0, 1, 1, 1, 4, 4), (1, -1, 1, 1, 4, 4), (1, 1, 4, 1, 4, 4), (1, 1, 1, -0.5, 4, 4)])
def test_intrinsics_validation(args):
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(*args)


def test_rodrigues_angle():
    w = np.array([0.1, -0.2, 0.3])
    R = rodrigues(w)
    assert rotation_angle(R) == pytest.approx(np.linalg.norm(w), abs=1e-12)
    np.testing.assert_allclose(R @ w, w, atol=1e-12)


def test_in_frustum_vs_brute_projection():
    rng = np.random.default_rng(2)
    pose = look_at([0.1, 0.0, -0.2], [0.0, 0.05, 1.0])
    to_cam = pose.inverse()
    x = rng.uniform(-2, 2, size=(1000, 3))
    got = in_frustum(x, K, to_cam)
    R, t = to_cam.rotation, to_cam.translation
    for i in range(len(x)):
        xc = R @ x[i] + t
        ok = False
        if xc[2] > 0:
            u = K.fx * xc[0] / xc[2] + K.cx
            v = K.fy * xc[1] / xc[2] + K.cy
            ok = 0 <= u < K.width and 0 <= v < K.height
        assert got[i] == ok
    assert got.any() and not got.all()


def test_in_frustum_simple_cases():
    I = RigidTransform.identity()
    assert in_frustum(np.array([[0.0, 0.0, 1.0]]), K, I)[0]
    assert not in_frustum(np.array([[0.0, 0.0, -1.0]]), K, I)[0]


def test_pixel_grid_row_major():
    g = pixel_grid(K)
    idx = 5 * K.width + 7
    np.testing.assert_array_equal(g[idx], [7, 5])
    assert g.shape == (K.width * K.height, 2)


def test_camera_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    T = rand_T(rng)
    save_camera_json(tmp_path / "cam.json", K, T, note="x")
    k2, T2, doc = load_camera_json(tmp_path / "cam.json")
    assert k2 == K
    np.testing.assert_array_equal(T2.matrix, T.matrix)
    assert doc["note"] == "x"
    assert len(doc["T"]) == 16
