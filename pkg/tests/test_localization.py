from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from panocalib.experiments import LOC_REF_POSE, loc_scene
from panocalib.geometry import Panorama, Pose, rot_z
from panocalib.localization import (LocalizationError, LocalizeConfig, angular_residuals, build_reference_map,
                                    evaluate_queries, extract_features, localize_query, match_features, p3p,
                                    pnp_ransac, pose_error, retrieval_distances, sample_poses, sample_queries)
from panocalib.predictor import CorruptionSpec, OraclePredictor
from panocalib.scenegen import build_scene, render_panorama, room_spec


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


def quaternion_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    qa, qb = Rotation.from_matrix(a).as_quat(), Rotation.from_matrix(b).as_quat()
    return float(np.degrees(2 * np.arccos(np.clip(abs(qa @ qb), 0.0, 1.0))))


@pytest.fixture(scope="module")
def loc():
    scene = loc_scene(0)
    ref, _ = render_panorama(scene, LOC_REF_POSE, 512, 256)
    gt = OraclePredictor(scene=scene)
    return scene, ref, gt, build_reference_map(ref, gt, LocalizeConfig(), 0)


# ---------------------------------------------------------------- pose pool


def test_pool_size_and_yaws():
    bbox = (np.array([-1.0, -2.0, 0.0]), np.array([3.0, 2.0, 2.5]))
    poses = sample_poses(bbox, 100, 8, 0)
    assert len(poses) == 800
    yaws = [np.arctan2(p.rotation[1, 0], p.rotation[0, 0]) for p in poses[:8]]
    np.testing.assert_allclose(np.mod(yaws, 2 * np.pi), 2 * np.pi * np.arange(8) / 8, atol=1e-12)
    for p in sample_poses(bbox, 5, 1, 0):
        np.testing.assert_array_equal(p.rotation, np.eye(3))


def test_pool_containment_and_determinism():
    lo, hi = np.array([-1.0, -2.0, 0.0]), np.array([3.0, 2.0, 2.5])
    pts = np.array([p.translation for p in sample_poses((lo, hi), 10_000, 1, 5)])
    ext = hi - lo
    assert np.all(pts >= lo + 0.1 * ext) and np.all(pts <= hi - 0.1 * ext)
    a = [p.translation for p in sample_poses((lo, hi), 10, 2, 3)]
    b = [p.translation for p in sample_poses((lo, hi), 10, 2, 3)]
    np.testing.assert_array_equal(a, b)
    with pytest.raises(LocalizationError):
        sample_poses((lo, np.array([3.0, -2.0, 2.5])), 10, 1)


def test_config_invariants():
    with pytest.raises(ValueError):
        LocalizeConfig(top_k=0)


# ---------------------------------------------------------------- descriptors


def test_identical_images_identical_descriptors(loc):
    _, ref, _, _ = loc
    (g1, f1), (g2, f2) = extract_features(ref), extract_features(ref)
    assert g1.distance(g2) == 0.0
    np.testing.assert_array_equal(f1.descriptors, f2.descriptors)
    assert abs(np.linalg.norm(g1.vector) - 1.0) < 1e-6
    assert len(g1.vector) == 512


def test_dimmed_image_is_closer_than_other_scenes():
    pose = Pose.from_yaw(0.4, (0.0, 0.0, 1.5))
    images = []
    for seed in range(10):
        spec = room_spec(6.0 + 0.3 * seed, 5.0 + 0.2 * seed, 3.0,
                         random_obstacles={"count": 3, "keep_clear": [[0.0, 0.0]], "clear_radius": 1.0})
        images.append(render_panorama(build_scene(spec, seed), pose, 256, 128)[0])
    descs = [extract_features(im)[0] for im in images]
    for i, im in enumerate(images):
        dim = extract_features(Panorama(im.rgb * 0.75))[0]
        own = dim.distance(descs[i])
        others = [dim.distance(d) for j, d in enumerate(descs) if j != i]
        assert own < min(others)


def test_yaw_roll_shifts_features(loc):
    _, ref, _, _ = loc
    c = 37
    _, a = extract_features(ref)
    _, b = extract_features(Panorama(np.roll(ref.rgb, c, axis=1)))
    w = ref.width
    moved = np.mod(a.pixels[:, 0] + c, w)
    hits = 0
    for (u, v) in np.stack([moved, a.pixels[:, 1]], axis=1):
        du = np.abs(np.mod(b.pixels[:, 0] - u + w / 2, w) - w / 2)
        if np.any((du <= 1.0) & (np.abs(b.pixels[:, 1] - v) <= 1.0)):
            hits += 1
    assert hits >= 0.9 * len(a)


def test_match_features_identity(loc):
    _, ref, _, _ = loc
    _, f = extract_features(ref)
    pairs = match_features(f, f)
    assert len(pairs) > 0.9 * len(f)
    np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])
    assert len(match_features(f.subset(np.zeros(len(f), bool)), f)) == 0


# ---------------------------------------------------------------- reference map


def test_identity_view_reproduces_reference():
    scene = loc_scene(0)
    ref, _ = render_panorama(scene, LOC_REF_POSE, 128, 64)
    m = build_reference_map(ref, OraclePredictor(scene=scene), LocalizeConfig(n_t=1, n_r=1),
                            poses=[Pose.identity()], keep_views=True)
    assert len(m.views) == 1
    sv = m.views[0].view
    assert sv.mask.mean() > 0.95
    np.testing.assert_allclose(sv.image.rgb[sv.mask], ref.rgb[sv.mask], atol=1e-12)


def test_reference_map_structure(loc):
    _, _, _, m = loc
    assert len(m.views) == 100 * 8
    lo, hi = m.bbox
    for v in m.views:
        assert np.all(v.pose.translation >= lo) and np.all(v.pose.translation <= hi)
    counts = np.array([len(v.features) for v in m.views])
    assert np.mean(counts >= 50) >= 0.8
    for v in m.views[:16]:
        assert v.features.points is not None and len(v.features.points) == len(v.features)


def test_pool_view_retrieves_itself():
    scene = loc_scene(0)
    ref, _ = render_panorama(scene, LOC_REF_POSE, 256, 128)
    cfg = LocalizeConfig(n_t=10, n_r=4)
    m = build_reference_map(ref, OraclePredictor(scene=scene), cfg, 1, keep_views=True)
    for i in range(0, len(m.views), 3):
        sv = m.views[i].view
        q, _ = extract_features(sv.image, valid=sv.mask)
        d = retrieval_distances(q, m.descriptor_matrix(), m.cell_matrix())
        assert int(np.argmin(d)) == i


# ---------------------------------------------------------------- solvers


def exact_problem(rng, n):
    rot = random_rotation(rng)
    t = rng.uniform(-1, 1, 3)
    cam = rng.normal(size=(n, 3))
    cam *= rng.uniform(1.0, 5.0, (n, 1)) / np.linalg.norm(cam, axis=1, keepdims=True)
    return rot, t, cam / np.linalg.norm(cam, axis=1, keepdims=True), cam @ rot.T + t


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_p3p_contains_true_pose(seed):
    rng = np.random.default_rng(seed)
    rot, t, f, x = exact_problem(rng, 3)
    sols = p3p(f, x)
    assert sols
    err = min(np.abs(r - rot).max() + np.abs(tt - t).max() for r, tt in sols)
    assert err < 1e-6


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.integers(6, 40))
def test_pnp_ransac_exact(seed, n):
    rng = np.random.default_rng(seed)
    rot, t, f, x = exact_problem(rng, n)
    res = pnp_ransac(f, x, 50, np.deg2rad(1.0), rng)
    assert res.status == "ok" and res.inliers.all()
    te, re = pose_error(res.pose, Pose(rot, t))
    assert te <= 1e-6 and re <= 1e-6
    assert angular_residuals(res.pose.rotation, res.pose.translation, f, x).max() < 1e-8


def test_pnp_rejects_outliers():
    rng = np.random.default_rng(9)
    rot, t, f, x = exact_problem(rng, 40)
    x[:12] += rng.normal(0, 1.0, (12, 3))
    res = pnp_ransac(f, x, 500, np.deg2rad(1.0), rng)
    assert res.status == "ok"
    assert not res.inliers[:12].any() and res.inliers[12:].all()
    assert pose_error(res.pose, Pose(rot, t))[0] < 1e-6


def test_pnp_degenerate():
    rng = np.random.default_rng(0)
    _, _, f, x = exact_problem(rng, 2)
    assert pnp_ransac(f, x, 10, 0.01, rng).status == "too-few-matches"


def test_pose_error_examples():
    p = Pose.from_yaw(0.3, (1.0, 2.0, 0.5))
    assert pose_error(p, p) == (0.0, 0.0)
    q = Pose(rot_z(np.deg2rad(10.0)) @ p.rotation, p.translation)
    te, re = pose_error(q, p)
    assert te == 0.0 and abs(re - 10.0) < 1e-9


def test_pose_error_matches_quaternion_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b = random_rotation(rng), random_rotation(rng)
        ta, tb = rng.normal(size=3), rng.normal(size=3)
        te, re = pose_error(Pose(a, ta), Pose(b, tb))
        assert te == pytest.approx(np.linalg.norm(ta - tb), abs=1e-12)
        assert re == pytest.approx(quaternion_angle_deg(a, b), abs=1e-9)


# ---------------------------------------------------------------- queries


def test_reference_self_query(loc):
    _, ref, _, m = loc
    res = localize_query(ref, m, LocalizeConfig(), 0)
    assert res.status == "ok"
    te, re = pose_error(res.pose, Pose.identity())
    assert te <= 0.05 and re <= 1.0


def test_pool_pose_query(loc):
    scene, _, _, m = loc
    # the first pool pose (reference frame) whose world position is free
    pose = next(v.pose for v in m.views[2::8] if scene.scene.is_free(LOC_REF_POSE.compose(v.pose).translation, 0.3))
    world = LOC_REF_POSE.compose(pose)
    q, _ = render_panorama(scene, world, 512, 256)
    res = localize_query(q, m, LocalizeConfig(), 0)
    assert res.status == "ok"
    te, re = pose_error(res.pose, pose)
    assert te <= 0.05 and re <= 1.0


def test_solid_colour_query(loc):
    _, _, _, m = loc
    res = localize_query(Panorama(np.full((256, 512, 3), 0.4)), m, LocalizeConfig(), 0)
    assert res.status == "no-matches" and res.pose is None


def test_error_grows_with_corruption(loc):
    scene, ref, _, _ = loc
    queries = sample_queries(scene, LOC_REF_POSE, 8, 2.0, 512, 256, 0)
    cfg = LocalizeConfig(n_t=40)
    medians = []
    for k in (1.0, 1.15, 1.3):
        m = build_reference_map(ref, OraclePredictor(CorruptionSpec(scale=k), scene=scene), cfg, 0)
        medians.append(evaluate_queries(m, queries, cfg, 0).median_t)
    assert medians[0] <= medians[1] <= medians[2]
