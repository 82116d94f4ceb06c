"""Command-line entry point.

Every subcommand writes its artifacts under ``--out-dir`` together with
``manifest.json`` (argv, resolved config, seed, versions and the sha256 of
each artifact). ``replay`` re-runs a manifest into another directory.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as pio
from .kernels import BACKEND

MANIFEST = "manifest.json"


class CliError(RuntimeError):
    pass


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- plumbing


class Run:
    """Artifact writer that records a digest per file."""

    def __init__(self, out_dir: Path):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_depth(self, stem: str, depth, vmax: float | None = None) -> None:
        self.write_bytes(f"{stem}.pdr", pio.encode_pdr(depth))
        self.write_bytes(f"{stem}_heat.png", pio.encode_png(pio.depth_heatmap(depth, vmax)))


def _jsonable(value):
    if dataclasses.is_dataclass(value):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _versions() -> dict:
    import scipy

    return {"panocalib": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernels": BACKEND}


def _write_manifest(run: Run, args, argv: list) -> None:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir")}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "config": config,
        "versions": _versions(),
        "outputs": dict(sorted(run.outputs.items())),
    }
    (run.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _floats(text: str, n: int | None = None) -> list:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _room(text: str):
    return _floats(text, 3)


def _triple(text: str):
    return _floats(text, 3)


def _pair(text: str):
    return _floats(text, 2)


def _corruption(text: str):
    from .predictor import CorruptionSpec

    try:
        return CorruptionSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _predictor_choice(text: str):
    """``gt`` | ``corrupt:<spec>`` | ``calibrated:<params.json>``."""
    if text == "gt":
        return ("gt", None)
    kind, _, payload = text.partition(":")
    if kind == "corrupt" and payload:
        return ("corrupt", _corruption(payload))
    if kind == "calibrated" and payload:
        return ("calibrated", Path(payload))
    raise argparse.ArgumentTypeError(f"expected gt, corrupt:<spec> or calibrated:<params.json>, got {text!r}")


def _make_predictor(choice, scene, corruption=None):
    """Oracle predictor for a ``--predictor`` choice; calibrated params apply over ``corruption``."""
    from .calibration import CalibratedPredictor, CorrectionParams
    from .predictor import OraclePredictor

    kind, payload = choice
    if kind == "gt":
        return OraclePredictor(scene=scene)
    if kind == "corrupt":
        return OraclePredictor(payload, scene=scene)
    params = CorrectionParams.from_json(json.loads(payload.read_text()))
    return CalibratedPredictor(OraclePredictor(corruption, scene=scene), params)


class _TruthTable:
    """Ground truth keyed by the 8-bit image content, for images read from disk."""

    def __init__(self):
        self._table: dict[bytes, object] = {}

    @staticmethod
    def key(pano) -> bytes:
        return hashlib.sha1(pio.to_uint8(pano.rgb).tobytes()).digest()

    def add(self, pano, depth) -> None:
        self._table[self.key(pano)] = depth

    def lookup_image(self, pano):
        return self._table.get(self.key(pano))


def _load_images(images: list, depths: list | None):
    """Panoramas from PNG files, with truth attached when depth files are given."""
    from .geometry import Panorama

    if depths and len(depths) != len(images):
        raise CliError(f"{len(images)} images but {len(depths)} depth files")
    out = []
    for i, path in enumerate(images):
        pano = pio.read_panorama(path)
        if depths:
            truth = pio.read_pdr(depths[i])
            if truth.depth.shape != pano.rgb.shape[:2]:
                raise CliError(f"{depths[i]} does not match the size of {path}")
            pano = Panorama(pano.rgb, truth)
        out.append(pano)
    return out


def _base_predictor(args):
    from .predictor import CorruptionSpec, OraclePredictor, SubprocessPredictor

    if getattr(args, "predictor_cmd", None):
        return SubprocessPredictor(args.predictor_cmd)
    return OraclePredictor(args.corruption or CorruptionSpec())


def _scene(args):
    from .scenegen import build_scene, load_scene_spec, room_spec

    spec = load_scene_spec(args.scene) if args.scene else room_spec(*args.room)
    return build_scene(spec, args.scene_seed if args.scene_seed is not None else args.seed)


def _grid_png(grid) -> bytes:
    """Occupancy grid image, +y up: occupied black, free white, unknown grey."""
    from .mapping import FREE, OCCUPIED

    img = np.full(grid.cells.shape, 128, dtype=np.uint8)
    img[grid.cells == FREE] = 255
    img[grid.cells == OCCUPIED] = 0
    return pio.encode_png(img[::-1])


# ---------------------------------------------------------------- commands


def cmd_synth(args, run: Run) -> None:
    from .geometry import Pose, rot_z
    from .scenegen import render_panorama

    handle = _scene(args)
    if args.poses:
        poses = pio.read_poses(args.poses)
    else:
        rng = np.random.default_rng(args.seed)
        poses = []
        lo, hi = handle.scene.lo, handle.scene.hi
        for _ in range(10000 * max(args.count, 1)):
            if len(poses) == args.count:
                break
            xy = rng.uniform(lo[:2] + 0.3, hi[:2] - 0.3)
            p = np.array([xy[0], xy[1], args.camera_height])
            if handle.scene.is_free(p, 0.3):
                poses.append(Pose(rot_z(rng.uniform(-np.pi, np.pi)), p))
        if len(poses) < args.count:
            raise CliError("could not place the requested number of cameras")
    rows = ["index,x,y,z,mean_depth"]
    for i, pose in enumerate(poses):
        pano, depth = render_panorama(handle, pose, args.width, args.width // 2)
        run.write_bytes(f"pano_{i:03d}.png", pio.encode_panorama(pano))
        run.write_depth(f"depth_{i:03d}", depth)
        run.write_json(f"pose_{i:03d}.json", pose.to_json())
        x, y, z = pose.translation.tolist()
        rows.append(f"{i},{x!r},{y!r},{z!r},{depth.mean()!r}")
    run.write_json("poses.json", [p.to_json() for p in poses])
    run.write_json("scene.json", handle.scene.to_json())
    run.write_text("frames.csv", "\n".join(rows) + "\n")


def _calib_config(args):
    from .calibration import profile_config

    return profile_config(args.profile, steps=args.steps, lr=args.lr, n_aug=args.n_aug, batch=args.batch,
                          n_fwd=args.n_fwd, seed=args.seed, scale_warmup=args.scale_warmup)


def cmd_calibrate(args, run: Run) -> None:
    from .calibration import CalibratedPredictor, calibrate_offline, calibrate_online, navigation_calibration, \
        trace_csv
    from .losses import LossConfig

    images = _load_images(args.images, args.depths)
    predictor = CalibratedPredictor(_base_predictor(args))
    cfg = _calib_config(args)
    loss_cfg = LossConfig(chamfer_samples=args.chamfer_samples)
    if args.profile == "online":
        rows = ["index,stretch,chamfer,normal,total,log_scale,gamma"]
        stream = calibrate_online(predictor, images, cfg, loss_cfg)
        i = 0
        while True:
            try:
                depth, before, rep = next(stream)
            except StopIteration as done:
                params = done.value
                break
            run.write_depth(f"online_{i:03d}", depth)
            rows.append(f"{i},{rep.stretch!r},{rep.chamfer!r},{rep.normal!r},{rep.total!r},"
                        f"{before.log_scale!r},{before.gamma!r}")
            i += 1
        run.write_text("online.csv", "\n".join(rows) + "\n")
        trace = []
    elif args.profile == "offline":
        res = calibrate_offline(predictor, images, cfg, loss_cfg)
        params, trace = res.params, res.trace
    else:
        if not args.log:
            raise CliError(f"profile {args.profile} needs --log")
        entries = json.loads(Path(args.log).read_text())
        agent_log = [(images[int(e["image"])], e["action"]) for e in entries]
        res = navigation_calibration(predictor, agent_log, cfg, loss_cfg)
        params, trace = res.params, res.trace
    run.write_json("params.json", params.to_json())
    run.write_text("trace.csv", trace_csv(trace, len(params.band_bias)))
    calibrated = predictor.with_params(params)
    for i, pano in enumerate(images):
        run.write_depth(f"calibrated_{i:03d}", calibrated.predict(pano))


def cmd_eval_depth(args, run: Run) -> None:
    from .metrics import depth_metrics, mean_metrics

    if len(args.pred) != len(args.gt):
        raise CliError(f"{len(args.pred)} predictions but {len(args.gt)} ground-truth files")
    items = [depth_metrics(pio.read_pdr(p), pio.read_pdr(g)) for p, g in zip(args.pred, args.gt)]
    mean = mean_metrics(items)
    rows = ["name," + mean.header()]
    rows += [f"{Path(p).name},{m.as_row()}" for p, m in zip(args.pred, items)]
    rows.append(f"mean,{mean.as_row()}")
    text = "\n".join(rows) + "\n"
    run.write_text("metrics.csv", text)
    sys.stdout.write(text)


def cmd_losses(args, run: Run) -> None:
    from .losses import BASELINES, LossConfig, baseline_loss, total_loss

    images = _load_images(args.images, args.depths)
    predictor = _base_predictor(args)
    cfg = LossConfig(chamfer_samples=args.chamfer_samples)
    names = list(BASELINES) if args.baselines else []
    rows = ["index,stretch,chamfer,normal,total" + "".join(f",{b}" for b in names)]
    streams = np.random.SeedSequence(args.seed).spawn(len(images))
    for i, (pano, ss) in enumerate(zip(images, streams)):
        rng = np.random.default_rng(ss)
        rep = total_loss(predictor, pano, cfg, rng)
        extra = "".join(f",{baseline_loss(b, predictor, pano, cfg, rng)!r}" for b in names)
        rows.append(f"{i},{rep.stretch!r},{rep.chamfer!r},{rep.normal!r},{rep.total!r}{extra}")
    text = "\n".join(rows) + "\n"
    run.write_text("losses.csv", text)
    sys.stdout.write(text)


def cmd_augment(args, run: Run) -> None:
    from .calibration import augment, augment_branch
    from .losses import LossConfig

    images = _load_images(args.images, args.depths)
    predictor = _base_predictor(args)
    cfg = LossConfig()
    rng = np.random.default_rng(args.seed)
    rows = ["image,index,branch,mean_prediction"]
    for i, pano in enumerate(images):
        d_hat = predictor.predict(pano)
        branch = augment_branch(d_hat.mean(), cfg)
        for j in range(args.n_aug):
            aug = augment(pano, d_hat, cfg, rng)
            run.write_bytes(f"aug_{i:03d}_{j:02d}.png", pio.encode_panorama(aug))
            if aug.truth is not None:
                run.write_depth(f"aug_{i:03d}_{j:02d}_truth", aug.truth)
            rows.append(f"{i},{j},{branch},{d_hat.mean()!r}")
    run.write_text("augment.csv", "\n".join(rows) + "\n")


def _map_rows(run: Run, name: str, res, reference) -> str:
    from .mapping import map_metrics

    m = map_metrics(res.grid, reference.grid)
    run.write_bytes(f"{name}_grid.png", _grid_png(res.grid))
    poses = ["step,est_x,est_y,est_theta,gt_x,gt_y,gt_theta"]
    poses += [f"{i}," + ",".join(repr(float(v)) for v in (*e.as_tuple(), *g.as_tuple()))
              for i, (e, g) in enumerate(zip(res.est_poses, res.gt_poses))]
    run.write_text(f"{name}_poses.csv", "\n".join(poses) + "\n")
    return f"{name},{m.as_row()},{res.final_error()!r},{res.collisions},{res.fallbacks}"


def cmd_map(args, run: Run) -> None:
    from .calibration import CalibConfig
    from .experiments import NAV_START, slam_experiment
    from .mapping import Pose2D, TrajectorySpec, loop_trajectory, run_fixed_trajectory_slam
    from .predictor import OraclePredictor

    handle = _scene(args)
    if args.trajectory:
        traj = TrajectorySpec.from_json(json.loads(Path(args.trajectory).read_text()))
    else:
        start = Pose2D(*args.start) if args.start else NAV_START
        traj = loop_trajectory(args.side_steps, args.laps, start)
    noise = (args.odom_noise[0], np.deg2rad(args.odom_noise[1]))
    reference = run_fixed_trajectory_slam(handle, traj, OraclePredictor(scene=handle), width=args.width,
                                          height=args.width // 2, use_gt_poses=True)
    rows = ["run,chamfer2d,mae,psnr,iou,final_error,collisions,fallbacks"]
    if args.calibrate:
        kind, payload = args.predictor
        if kind != "corrupt":
            raise CliError("--calibrate needs --predictor corrupt:<spec>")
        cfg = CalibConfig(steps=args.steps, scale_warmup=args.steps, n_fwd=args.n_fwd, n_aug=args.n_aug,
                          seed=args.seed)
        cmp_ = slam_experiment(handle, traj, payload, args.seed, noise, args.width,
                               (args.log_width, args.log_width // 2), cfg)
        rows += [_map_rows(run, "corrupted", cmp_.corrupted, reference),
                 _map_rows(run, "calibrated", cmp_.calibrated, reference)]
        run.write_json("params.json", cmp_.params.to_json())
    else:
        predictor = _make_predictor(args.predictor, handle, args.corruption)
        res = run_fixed_trajectory_slam(handle, traj, predictor, noise, args.seed, args.width, args.width // 2)
        rows.append(_map_rows(run, args.predictor[0], res, reference))
    run.write_bytes("reference_grid.png", _grid_png(reference.grid))
    run.write_text("map_metrics.csv", "\n".join(rows) + "\n")
    run.write_json("trajectory.json", traj.to_json())


def _loc_rows(name: str, rep) -> tuple[list, str]:
    rows = [f"{name},{i},{t!r},{r!r},{n},{s}" for i, (t, r, n, s) in
            enumerate(zip(rep.t_err.tolist(), rep.r_err.tolist(), rep.inliers, rep.status))]
    summary = f"{name},{rep.median_t!r},{rep.median_r!r}," + ",".join(repr(v) for v in rep.accuracy.values())
    return rows, summary


def cmd_localize(args, run: Run) -> None:
    from .calibration import CalibConfig
    from .experiments import LOC_REF_POSE, localization_experiment
    from .localization import LocalizeConfig, build_reference_map, evaluate_queries, sample_queries
    from .predictor import CorruptionSpec
    from .scenegen import render_panorama

    handle = _scene(args)
    ref_pose = pio.read_pose(args.reference) if args.reference else LOC_REF_POSE
    cfg = LocalizeConfig(n_t=args.n_t, n_r=args.n_r, top_k=args.top_k)
    if args.predictor is None:
        cmp_ = localization_experiment(handle, args.corruption or CorruptionSpec(), args.seed, ref_pose, args.width,
                                       args.queries, args.max_dist, cfg, args.calib_width,
                                       CalibConfig(steps=args.steps, seed=args.seed))
        reports = (("gt", cmp_.gt), ("corrupted", cmp_.corrupted), ("calibrated", cmp_.calibrated))
        run.write_json("params.json", cmp_.params.to_json())
    else:
        ref, _ = render_panorama(handle, ref_pose, args.width, args.width // 2)
        queries = sample_queries(handle, ref_pose, args.queries, args.max_dist, args.width, args.width // 2,
                                 args.seed)
        ref_map = build_reference_map(ref, _make_predictor(args.predictor, handle, args.corruption), cfg, args.seed)
        reports = ((args.predictor[0], evaluate_queries(ref_map, queries, cfg, args.seed)),)
    rows = ["predictor,query,t_err,r_err,inliers,status"]
    summary = ["predictor,median_t,median_r," + ",".join(f"acc_{t:g}m_{r:g}deg" for t, r in cfg.thresholds)]
    for name, rep in reports:
        per_query, line = _loc_rows(name, rep)
        rows += per_query
        summary.append(line)
    run.write_text("queries.csv", "\n".join(rows) + "\n")
    run.write_text("localization.csv", "\n".join(summary) + "\n")


def cmd_domains(args, run: Run) -> None:
    from .predictor import SHIFT_KINDS, ImageShiftSpec, shift_image

    kinds = args.shifts.split(",") if args.shifts else list(SHIFT_KINDS)
    specs = []
    for k in kinds:
        try:
            specs.append(ImageShiftSpec(k.strip()))
        except ValueError as exc:
            raise CliError(str(exc)) from None
    images = _load_images(args.images, args.depths)
    rows = ["image,shift,file"]
    streams = np.random.SeedSequence(args.seed).spawn(len(images) * len(specs))
    for i, pano in enumerate(images):
        for j, spec in enumerate(specs):
            out = shift_image(pano, spec, np.random.default_rng(streams[i * len(specs) + j]))
            name = f"{spec.kind}_{i:03d}.png"
            run.write_bytes(name, pio.encode_panorama(out))
            if out.truth is not None and spec.kind == "rotation":
                run.write_depth(f"{spec.kind}_{i:03d}_truth", out.truth)
            rows.append(f"{i},{spec.kind},{name}")
    run.write_text("domains.csv", "\n".join(rows) + "\n")


def cmd_serve(args) -> int:
    from .predictor import CorruptionSpec, OraclePredictor, serve

    table = _TruthTable()
    for pano in _load_images(args.images, args.depths):
        table.add(pano, pano.truth)
    served = serve(OraclePredictor(args.corruption or CorruptionSpec(), scene=table), sys.stdin.buffer,
                   sys.stdout.buffer)
    print(f"served {served} requests", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- parser


def _add_predictor(p, images: bool = True) -> None:
    if images:
        p.add_argument("--images", nargs="+", type=Path, required=True, help="equirectangular PNG files")
        p.add_argument("--depths", nargs="+", type=Path, help="PDR1 ground truth per image (oracle predictor)")
    p.add_argument("--corruption", type=_corruption, help='oracle corruption, e.g. "scale=1.3,domain=out_of_band"')
    p.add_argument("--predictor-cmd", help="external predictor command speaking the framed PNG/PDR1 protocol")


def _add_scene(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--scene", type=Path, help="scene JSON")
    g.add_argument("--room", type=_room, default=[10.0, 10.0, 3.0], help="empty room W,D,H in metres")
    p.add_argument("--scene-seed", type=int, help="seed for random obstacles (default: --seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panocalib", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"panocalib {__version__}")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="upper bound on worker threads (runs are sequential and deterministic)")
    parser.add_argument("--out-dir", type=Path, default=Path("out"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render panoramas and GT depth from a scene")
    _add_scene(p)
    p.add_argument("--poses", type=Path, help="pose JSON (one pose or a list)")
    p.add_argument("--count", type=int, default=4, help="random free-space cameras when --poses is absent")
    p.add_argument("--camera-height", type=float, default=1.5)
    p.add_argument("--width", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="fit the depth correction on unlabeled panoramas")
    _add_predictor(p)
    p.add_argument("--profile", choices=("offline", "online", "nav-explore", "nav-pointgoal"), default="offline")
    p.add_argument("--log", type=Path, help='agent log JSON: [{"image": index, "action": "forward"}, ...]')
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-aug", type=int)
    p.add_argument("--n-fwd", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--scale-warmup", type=int)
    p.add_argument("--chamfer-samples", type=int, default=1024)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval-depth", help="depth metrics of predictions against ground truth")
    p.add_argument("--pred", nargs="+", type=Path, required=True)
    p.add_argument("--gt", nargs="+", type=Path, required=True)
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("losses", help="self-consistency and baseline losses per image")
    _add_predictor(p)
    p.add_argument("--baselines", action="store_true", help="also report flip/mask/photometric/pseudo-label")
    p.add_argument("--chamfer-samples", type=int, default=2048)
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("augment", help="synthesize training views (stretch or warp)")
    _add_predictor(p)
    p.add_argument("--n-aug", type=int, default=10)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("map", help="fixed-trajectory occupancy mapping")
    _add_scene(p)
    p.add_argument("--trajectory", type=Path, help="trajectory JSON; default is a square loop")
    p.add_argument("--side-steps", type=int, default=16)
    p.add_argument("--laps", type=int, default=1)
    p.add_argument("--start", type=_triple, help="x,y,theta of the loop start")
    p.add_argument("--odom-noise", type=_pair, default=[0.02, 1.0], help="sigma_xy (m), sigma_theta (deg)")
    p.add_argument("--predictor", type=_predictor_choice, default=("gt", None),
                   help="gt | corrupt:<spec> | calibrated:<params.json>")
    p.add_argument("--corruption", type=_corruption, help="base corruption under calibrated:<params.json>")
    p.add_argument("--calibrate", action="store_true",
                   help="map with corrupt:<spec>, calibrate on that run's log, map again")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--n-fwd", type=int, default=25)
    p.add_argument("--n-aug", type=int, default=10)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--log-width", type=int, default=64)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("localize", help="map-free localization: GT vs corrupted vs calibrated")
    _add_scene(p)
    p.set_defaults(room=[8.0, 8.0, 3.0])
    p.add_argument("--reference", type=Path, help="pose JSON of the reference camera")
    p.add_argument("--predictor", type=_predictor_choice,
                   help="gt | corrupt:<spec> | calibrated:<params.json>; default compares GT, "
                        "--corruption and its offline calibration")
    p.add_argument("--corruption", type=_corruption)
    p.add_argument("--n-t", type=int, default=100)
    p.add_argument("--n-r", type=int, default=8)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--queries", type=int, default=20, help="query renders near the reference")
    p.add_argument("--max-dist", type=float, default=2.0)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--calib-width", type=int, default=128)
    p.add_argument("--steps", type=int, default=80)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("domains", help="apply appearance/rotation domain shifts to panoramas")
    p.add_argument("--images", nargs="+", type=Path, required=True)
    p.add_argument("--depths", nargs="+", type=Path)
    p.add_argument("--shifts", help="comma-separated shift kinds (default: all)")
    p.set_defaults(func=cmd_domains)

    p = sub.add_parser("serve-predictor", help="answer framed PNG requests with oracle PDR1 depth on stdio")
    p.add_argument("--images", nargs="+", type=Path, required=True)
    p.add_argument("--depths", nargs="+", type=Path, required=True)
    p.add_argument("--corruption", type=_corruption)
    p.set_defaults(func=None)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=None)
    return parser


def run(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        if args.command == "replay":
            recorded = json.loads(args.manifest.read_text())["argv"]
            replay = build_parser().parse_args(recorded)
            replay.out_dir = args.out_dir
            args, argv = replay, recorded
        if args.command == "serve-predictor":
            return cmd_serve(args)
        job = Run(args.out_dir)
        args.func(args, job)
        _write_manifest(job, args, argv)
        return 0
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
