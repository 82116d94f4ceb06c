from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panocalib.geometry import (DepthMap, EmptyCloudError, GeometryError, Panorama, Pose, SphereDir, backproject,
                                dir_to_pixel, dirs_to_pixels, pixel_to_dir, pixels_to_dirs, rot_x, rot_z,
                                sphere_grid)
from panocalib.scenegen import build_scene, render, room_spec

W, H = 64, 32


def test_equator_meridian_is_plus_x():
    # phi = 0 at u = W/2 - 0.5, psi = pi/2 at v = H/2 - 0.5
    d = pixel_to_dir(W / 2 - 0.5, H / 2 - 0.5, W, H).as_array()
    np.testing.assert_allclose(d, [1.0, 0.0, 0.0], atol=1e-9)


def test_top_row_points_near_up():
    d = pixel_to_dir(0.0, 0.0, W, H)
    assert d.z == pytest.approx(np.cos(np.pi * 0.5 / H), abs=1e-12)


@pytest.mark.parametrize("vec, expected", [
    ((1.0, 0.0, 0.0), (W / 2 - 0.5, H / 2 - 0.5)),
    ((0.0, 1.0, 0.0), (3 * W / 4 - 0.5, H / 2 - 0.5)),
])
def test_dir_to_pixel_cardinal(vec, expected):
    np.testing.assert_allclose(dir_to_pixel(np.array(vec), W, H), expected, atol=1e-6)


def test_pole_clamps_to_first_row():
    u, v = dir_to_pixel(SphereDir(0.0, 0.0, 1.0), W, H)
    assert (u, v) == (0.0, 0.0)
    _, v = dir_to_pixel(np.array([0.0, 0.0, -1.0]), W, H)
    assert v == H - 1


def test_round_trip_random_pixels():
    rng = np.random.default_rng(0)
    u = rng.uniform(0, W, 1000)
    v = rng.uniform(0.5, H - 1.5, 1000)  # pole rows are the documented exception
    uu, vv = dirs_to_pixels(pixels_to_dirs(u, v, W, H), W, H)
    du = np.abs(uu - u)
    du = np.minimum(du, W - du)
    assert du.max() < 1e-6 and np.abs(vv - v).max() < 1e-6


@pytest.mark.parametrize("u, v", [(-0.1, 3), (W, 3), (3, -1e-9), (3, H)])
def test_pixel_out_of_range(u, v):
    with pytest.raises(GeometryError):
        pixel_to_dir(u, v, W, H)


def test_zero_vector_rejected():
    with pytest.raises(GeometryError):
        dir_to_pixel(np.zeros(3), W, H)


def test_sphere_dir_rejects_non_unit():
    with pytest.raises(GeometryError):
        SphereDir(1.0, 1.0, 0.0)


@given(st.floats(0, W, exclude_max=True), st.floats(0, H, exclude_max=True))
def test_bearings_are_unit(u, v):
    d = pixel_to_dir(u, v, W, H).as_array()
    assert abs(np.linalg.norm(d) - 1) < 1e-9


@pytest.mark.parametrize("value", [1.0, 2.5])
def test_backproject_constant_depth_norms(value):
    cloud = backproject(DepthMap(np.full((H, W), value)))
    assert len(cloud) == H * W
    np.testing.assert_allclose(np.linalg.norm(cloud.points, axis=1), value, rtol=0, atol=1e-9)


def test_backproject_skips_invalid_and_records_pixels():
    depth = np.full((H, W), 2.0)
    depth[3, 5] = np.nan
    depth[7, 9] = -1.0
    cloud = backproject(DepthMap(depth))
    assert len(cloud) == H * W - 2
    pix = {tuple(p) for p in cloud.source_pixel.tolist()}
    assert (5, 3) not in pix and (9, 7) not in pix and (0, 0) in pix


def test_backproject_all_invalid():
    with pytest.raises(EmptyCloudError):
        backproject(DepthMap(np.full((H, W), np.nan)))


def test_backproject_box_room_lands_on_walls():
    scene = build_scene(room_spec(4.0, 4.0, 3.0)).scene
    pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
    _, depth = render(scene, pose, 128, 64)
    pts = pose.apply(backproject(depth).points)
    # distance to the nearest of the six room planes, computed independently
    planes = np.stack([np.abs(pts[:, 0] - 2), np.abs(pts[:, 0] + 2), np.abs(pts[:, 1] - 2),
                       np.abs(pts[:, 1] + 2), np.abs(pts[:, 2]), np.abs(pts[:, 2] - 3)], axis=1)
    assert planes.min(axis=1).max() < 1e-3


depth_arrays = st.integers(0, 2**32 - 1).map(
    lambda s: np.random.default_rng(s).uniform(0.2, 9.0, (8, 16)))


@given(depth_arrays, st.floats(0.1, 10.0))
def test_backproject_scale_equivariant(depth, s):
    a = backproject(DepthMap(depth)).points
    b = backproject(DepthMap(depth * s)).points
    np.testing.assert_allclose(b, s * a, rtol=1e-12, atol=0)


@given(depth_arrays)
def test_backproject_norm_equals_depth(depth):
    cloud = backproject(DepthMap(depth))
    us, vs = cloud.source_pixel.T
    np.testing.assert_allclose(np.linalg.norm(cloud.points, axis=1), depth[vs, us], rtol=1e-9)


def test_sphere_grid_matches_pixel_to_dir():
    grid = sphere_grid(H, W)
    for u, v in [(0, 0), (17, 9), (W - 1, H - 1)]:
        np.testing.assert_allclose(grid[v, u], pixel_to_dir(u, v, W, H).as_array(), atol=1e-15)


def test_panorama_invariants():
    with pytest.raises(GeometryError):
        Panorama(np.zeros((4, 6, 3)))
    with pytest.raises(GeometryError):
        Panorama(np.full((4, 8, 3), 1.5))
    with pytest.raises(GeometryError):
        Panorama(np.full((4, 8, 3), np.nan))


@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
def test_pose_compose_inverse(a, b):
    p = Pose(rot_z(a) @ rot_x(b), np.array([0.3, -1.0, 2.0]))
    ident = p.compose(p.inverse())
    np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(ident.translation, 0.0, atol=1e-12)


def test_pose_rejects_non_rotation():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
