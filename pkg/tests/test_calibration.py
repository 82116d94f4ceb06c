from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import panocalib.calibration as calib
from panocalib.calibration import (CalibConfig, CalibratedPredictor, CalibrationError, CorrectionParams,
                                   apply_correction, augment, augment_branch, augmented_set, band_index,
                                   calibrate_offline, calibrate_online, fd_gradient, forward_frames,
                                   navigation_calibration, profile_config, trace_csv)
from panocalib.geometry import DepthMap, Panorama, Pose
from panocalib.losses import LossConfig
from panocalib.predictor import CorruptionSpec, OraclePredictor
from panocalib.scenegen import build_scene, render_panorama, room_spec

MID_POSE = Pose.from_yaw(0.3, (0.2, -0.1, 1.5))


@pytest.fixture(scope="module")
def mid_room():
    handle = build_scene(room_spec(4.0, 4.0, 3.0))
    pano, depth = render_panorama(handle, MID_POSE, 128, 64)
    return handle, pano, depth


def flat(value: float, h: int = 8) -> DepthMap:
    return DepthMap(np.full((h, 2 * h), value))


def test_params_json_round_trip():
    p = CorrectionParams(-0.2, 1.1, (0.1, -0.05, 0.0, 0.02))
    assert CorrectionParams.from_json(p.to_json()) == p
    assert CorrectionParams.identity(3).band_bias == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        CorrectionParams(0.0, 1.0, ())


@given(st.floats(-10, 10), st.floats(-5, 10))
def test_projection_lands_in_box(log_scale, gamma):
    p = CorrectionParams(log_scale, gamma).projected()
    assert p.in_box()
    if CorrectionParams(log_scale, gamma).in_box():
        assert (p.log_scale, p.gamma) == (log_scale, gamma)


def test_band_index():
    np.testing.assert_array_equal(band_index(8, 4), [0, 0, 1, 1, 2, 2, 3, 3])
    np.testing.assert_array_equal(band_index(3, 1), [0, 0, 0])


def test_correction_formula():
    rng = np.random.default_rng(0)
    base = DepthMap(rng.uniform(0.5, 4.0, (8, 16)))
    p = CorrectionParams(0.1, 0.9, (0.1, 0.0, -0.05, 0.2))
    out = apply_correction(base, p)
    bias = np.repeat([0.1, 0.0, -0.05, 0.2], 2)[:, None]
    np.testing.assert_allclose(out.depth, np.exp(0.1) * base.depth**0.9 + bias, rtol=1e-14)
    assert apply_correction(base, CorrectionParams(0.0, 1.0, (-10.0,) * 4)).depth.min() > 0


def test_calibrated_predictor_composes(mid_room):
    handle, pano, depth = mid_room
    p = CorrectionParams(np.log(2.0), 1.0, (0.0,) * 4)
    pred = CalibratedPredictor(OraclePredictor(scene=handle), p)
    np.testing.assert_allclose(pred.predict(pano).depth, 2.0 * depth.depth)
    np.testing.assert_array_equal(pred.with_params(CorrectionParams()).predict(pano).depth, depth.depth)


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(n_aug=-1), dict(lr=0.0), dict(batch=0)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        CalibConfig(**kw)


def test_profiles():
    assert profile_config("nav-pointgoal").n_fwd == 3
    assert profile_config("nav-explore").n_fwd == 25
    assert profile_config("offline", steps=5).steps == 5
    with pytest.raises(ValueError):
        profile_config("weekly")


def test_branch_statistics():
    cfg = LossConfig()
    for avg, branch in [(1.5, "warp"), (3.0, "shrink"), (0.8, "enlarge")]:
        assert all(augment_branch(avg, cfg) == branch for _ in range(1000))


@pytest.mark.parametrize("avg,lo,hi", [(3.0, 0.64, 0.8), (0.8, 1.25, 1.5625)])
def test_stretch_factor_ranges(monkeypatch, avg, lo, hi):
    seen = []
    monkeypatch.setattr(calib, "stretch_image", lambda img, k: seen.append(k) or img)
    img = Panorama(np.zeros((8, 16, 3)))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        augment(img, flat(avg), LossConfig(), rng)
    assert len(seen) == 1000
    assert lo <= min(seen) and max(seen) <= hi
    assert max(seen) - min(seen) > 0.9 * (hi - lo)


def test_in_band_augment_is_a_warp(monkeypatch, mid_room):
    _, pano, depth = mid_room
    monkeypatch.setattr(calib, "stretch_image", lambda *a: pytest.fail("stretched an in-band view"))
    out = augment(pano, depth, LossConfig(), 3)
    assert out.rgb.shape == pano.rgb.shape
    assert not np.array_equal(out.rgb, pano.rgb)


def test_zero_steps_returns_params_unchanged(mid_room):
    handle, pano, _ = mid_room
    p = CorrectionParams(0.3, 1.2, (0.0,) * 4)
    pred = CalibratedPredictor(OraclePredictor(CorruptionSpec(scale=1.3), scene=handle), p)
    res = calibrate_offline(pred, [pano], CalibConfig(steps=0))
    assert res.params == p and res.trace == []
    with pytest.raises(CalibrationError):
        calibrate_offline(pred, [], CalibConfig())


def test_gt_predictor_is_a_fixed_point(mid_room):
    handle, pano, depth = mid_room
    pred = CalibratedPredictor(OraclePredictor(scene=handle))
    res = calibrate_offline(pred, [pano], CalibConfig(steps=20, scale_warmup=10, n_aug=4),
                            LossConfig(chamfer_samples=1024))
    assert abs(res.params.log_scale) <= 0.02
    assert abs(res.params.gamma - 1.0) <= 0.02
    mae = np.abs(pred.with_params(res.params).predict(pano).depth - depth.depth).mean()
    assert mae < 0.01 * depth.depth.mean()
    for row in res.trace:
        assert row.params.in_box()
    assert trace_csv(res.trace).count("\n") == len(res.trace) + 1


def test_online_stream(mid_room):
    handle, pano, _ = mid_room
    base = OraclePredictor(CorruptionSpec(scale=1.2), scene=handle)
    cfg = CalibConfig(seed=4)
    loss_cfg = LossConfig(chamfer_samples=1024)

    def run():
        gen = calibrate_online(CalibratedPredictor(base), [pano] * 16, cfg, loss_cfg)
        return [(d.depth.copy(), p, r.total) for d, p, r in gen]

    out = run()
    np.testing.assert_array_equal(out[0][0], base.predict(pano).depth)
    assert out[0][1] == CorrectionParams.identity()
    losses = [t for _, _, t in out]
    tail = losses[5:]
    assert all(b <= a for a, b in zip(tail, tail[1:]))
    again = run()
    assert [t for _, _, t in again] == losses
    assert [p for _, p, _ in again] == [p for _, p, _ in out]


def test_online_rejects_empty_stream():
    with pytest.raises(CalibrationError):
        list(calibrate_online(CalibratedPredictor(OraclePredictor()), [], CalibConfig()))


def test_divergence_reports_trace(mid_room):
    handle, pano, _ = mid_room

    class Exploding:
        def predict(self, image):
            return DepthMap(np.full(image.rgb.shape[:2], np.inf))

    with pytest.raises(CalibrationError) as info:
        calibrate_offline(CalibratedPredictor(Exploding()), [pano], CalibConfig(n_aug=0, steps=3))
    assert isinstance(info.value.trace, list)


def _log(n_forward: int, n_turn: int = 2, size: int = 16):
    rng = np.random.default_rng(0)
    log = []
    for i in range(n_forward):
        for _ in range(n_turn):
            log.append((Panorama(rng.random((size, 2 * size, 3)), flat(1.5, size)), "turn_left"))
        log.append((Panorama(rng.random((size, 2 * size, 3)), flat(1.5, size)), "forward"))
    return log


def test_forward_frames():
    log = _log(30)
    frames = forward_frames(log, 25)
    assert len(frames) == 25
    assert frames[0] is log[2][0] and frames[-1] is log[3 * 25 - 1][0]
    with pytest.raises(CalibrationError, match="5 short"):
        forward_frames(_log(20), 25)
    with pytest.raises(CalibrationError):
        forward_frames([(p, "turn_left") for p, _ in _log(5)], 3)


@pytest.mark.parametrize("profile,n_fwd", [("nav-explore", 25), ("nav-pointgoal", 3)])
def test_navigation_set_size(profile, n_fwd):
    cfg = profile_config(profile, steps=0)
    pred = CalibratedPredictor(OraclePredictor())
    frames = forward_frames(_log(30), cfg.n_fwd)
    synthesized = len(augmented_set(pred, frames, cfg, LossConfig())) - len(frames)
    assert synthesized == n_fwd * 10
    res = navigation_calibration(pred, _log(30), cfg)
    assert res.n_images == n_fwd * 11
    assert res.params == CorrectionParams.identity()


def test_fd_gradient_on_quadratic():
    a = np.array([[3.0, 1.0], [1.0, 2.0]])
    x = np.array([0.4, -1.5])
    g = fd_gradient(lambda v: 0.5 * v @ a @ v, x, 1e-3)
    np.testing.assert_allclose(g, a @ x, rtol=1e-9)
    assert fd_gradient(lambda v: v @ v, x, 1e-3, active=[1])[0] == 0.0
