"""End-to-end recipes shared by the CLI and the acceptance suite.

Each recipe runs a downstream task with a corrupted predictor, calibrates,
reruns, and reports both sides against a ground-truth reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibConfig, CalibratedPredictor, CorrectionParams, calibrate_offline, navigation_calibration
from .geometry import Pose
from .localization import LocalizationReport, LocalizeConfig, build_reference_map, evaluate_queries, sample_queries
from .losses import LossConfig
from .mapping import MapMetrics, Pose2D, SlamResult, TrajectorySpec, loop_trajectory, map_metrics, \
    run_fixed_trajectory_slam
from .predictor import CorruptionSpec, OraclePredictor
from .scenegen import SceneHandle, build_scene, render_panorama, room_spec

# the navigation scene: every frame of the loop sees a mean depth above the band
NAV_ROOM = (10.0, 10.0, 3.0)
NAV_START = Pose2D(-2.0, -2.0, 0.0)
# the localization scene: a cluttered room with the reference camera near its centre
LOC_ROOM = (8.0, 8.0, 3.0)
LOC_REF_POSE = Pose.from_yaw(0.2, (0.3, -0.2, 1.5))


def nav_scene(seed: int = 0) -> SceneHandle:
    return build_scene(room_spec(*NAV_ROOM), seed)


def loc_scene(seed: int = 0) -> SceneHandle:
    spec = room_spec(*LOC_ROOM, random_obstacles={"count": 3, "keep_clear": [[0.0, 0.0]], "clear_radius": 1.5})
    return build_scene(spec, seed)


@dataclass
class SlamComparison:
    before: MapMetrics
    after: MapMetrics
    params: CorrectionParams
    corrupted: SlamResult
    calibrated: SlamResult
    reference: SlamResult


def slam_experiment(scene: SceneHandle, traj: TrajectorySpec, corruption: CorruptionSpec, seed: int = 0,
                    odom_noise=(0.02, np.deg2rad(1.0)), width: int = 256, log_size=(64, 32),
                    calib: CalibConfig | None = None, loss_cfg: LossConfig | None = None) -> SlamComparison:
    """Map with a corrupted predictor, calibrate on the agent log, map again.

    Both maps are scored against GT depth stitched at the GT poses.
    """
    height = width // 2
    gt = OraclePredictor(scene=scene)
    reference = run_fixed_trajectory_slam(scene, traj, gt, width=width, height=height, use_gt_poses=True)
    predictor = CalibratedPredictor(OraclePredictor(corruption, scene=scene))
    corrupted = run_fixed_trajectory_slam(scene, traj, predictor, odom_noise, seed, width, height,
                                          log_size=log_size)
    calib = calib or CalibConfig(steps=40, scale_warmup=40, seed=seed)
    result = navigation_calibration(predictor, corrupted.log, calib, loss_cfg or LossConfig(chamfer_samples=512))
    calibrated = run_fixed_trajectory_slam(scene, traj, predictor.with_params(result.params), odom_noise, seed,
                                           width, height)
    return SlamComparison(map_metrics(corrupted.grid, reference.grid), map_metrics(calibrated.grid, reference.grid),
                          result.params, corrupted, calibrated, reference)


def default_loop() -> TrajectorySpec:
    """100 actions: a 4 m square driven once."""
    return loop_trajectory(16, start=NAV_START)


@dataclass
class LocalizationComparison:
    gt: LocalizationReport
    corrupted: LocalizationReport
    calibrated: LocalizationReport
    params: CorrectionParams


def localization_experiment(scene: SceneHandle, corruption: CorruptionSpec, seed: int = 0,
                            ref_pose: Pose = LOC_REF_POSE, width: int = 512, n_queries: int = 20,
                            max_dist: float = 2.0, cfg: LocalizeConfig | None = None, calib_width: int = 128,
                            calib: CalibConfig | None = None,
                            loss_cfg: LossConfig | None = None) -> LocalizationComparison:
    """Localize the same queries against GT, corrupted and calibrated reference maps.

    Calibration runs offline on a low-resolution render of the reference view.
    """
    cfg = cfg or LocalizeConfig()
    ref, _ = render_panorama(scene, ref_pose, width, width // 2)
    small, _ = render_panorama(scene, ref_pose, calib_width, calib_width // 2)
    queries = sample_queries(scene, ref_pose, n_queries, max_dist, width, width // 2, seed)
    predictor = CalibratedPredictor(OraclePredictor(corruption, scene=scene))
    result = calibrate_offline(predictor, [small], calib or CalibConfig(seed=seed),
                               loss_cfg or LossConfig(chamfer_samples=1024))
    reports = []
    for pred in (OraclePredictor(scene=scene), predictor, predictor.with_params(result.params)):
        ref_map = build_reference_map(ref, pred, cfg, seed)
        reports.append(evaluate_queries(ref_map, queries, cfg, seed))
    return LocalizationComparison(*reports, result.params)
