"""Test-time calibration of a depth predictor through a small correction model.

The corrected prediction is ``exp(log_scale) * base**gamma + band_bias[band]``
where bands split the colatitude range into equal slices. Parameters are fit
by projected gradient descent on the self-supervised total loss, with
gradients taken by central finite differences.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap, EmptyCloudError, Panorama
from .losses import LossConfig, LossReport, stretch_target, total_loss
from .predictor import DepthPredictor
from .stretch import stretch_image
from .synth import sample_perturb_pose, warp_panorama

PROFILES = ("offline", "online", "nav-explore", "nav-pointgoal")
NAV_STEP_CAP = 300
SCALE_BOX = (0.1, 10.0)
GAMMA_BOX = (0.25, 4.0)


class CalibrationError(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class CorrectionParams:
    log_scale: float = 0.0
    gamma: float = 1.0
    band_bias: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.log_scale = float(self.log_scale)
        self.gamma = float(self.gamma)
        self.band_bias = tuple(float(b) for b in self.band_bias)
        if not self.band_bias:
            raise ValueError("need at least one latitude band")

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    def projected(self) -> "CorrectionParams":
        """Clamp into the feasible box (slightly inside the open bounds)."""
        lo_a, hi_a = np.log(SCALE_BOX[0]) + 1e-9, np.log(SCALE_BOX[1]) - 1e-9
        return CorrectionParams(
            float(np.clip(self.log_scale, lo_a, hi_a)),
            float(np.clip(self.gamma, GAMMA_BOX[0] + 1e-9, GAMMA_BOX[1] - 1e-9)),
            self.band_bias,
        )

    def in_box(self) -> bool:
        return SCALE_BOX[0] < self.scale < SCALE_BOX[1] and GAMMA_BOX[0] < self.gamma < GAMMA_BOX[1]

    def to_json(self) -> dict:
        return {"log_scale": self.log_scale, "gamma": self.gamma, "band_bias": list(self.band_bias)}

    @classmethod
    def from_json(cls, obj: dict) -> "CorrectionParams":
        return cls(obj["log_scale"], obj["gamma"], tuple(obj["band_bias"]))

    @classmethod
    def identity(cls, bands: int = 4) -> "CorrectionParams":
        return cls(0.0, 1.0, (0.0,) * bands)


def band_index(height: int, bands: int) -> np.ndarray:
    """Latitude band of every row; bands are equal slices of colatitude."""
    return np.minimum(((np.arange(height) + 0.5) * bands / height).astype(np.int64), bands - 1)


def apply_correction(depth: DepthMap, params: CorrectionParams) -> DepthMap:
    bias = np.asarray(params.band_bias)[band_index(depth.height, len(params.band_bias))]
    d = depth.filled(1.0)
    out = params.scale * np.power(d, params.gamma) + bias[:, None]
    return DepthMap(np.maximum(out, 1e-3), depth.valid)


def image_key(image: Panorama) -> bytes:
    return hashlib.sha1(np.ascontiguousarray(image.rgb).tobytes()).digest() + bytes(str(image.rgb.shape), "ascii")


class CalibratedPredictor(DepthPredictor):
    """A base predictor followed by the correction model.

    Base predictions are memoized by image content, since calibration
    re-evaluates the same images under many parameter settings.
    """

    def __init__(self, base: DepthPredictor, params: CorrectionParams | None = None, cache_size: int = 512,
                 _cache=None):
        self.base = base
        self.params = params or CorrectionParams.identity()
        self.cache_size = cache_size
        self._cache = OrderedDict() if _cache is None else _cache

    def base_predict(self, image: Panorama) -> DepthMap:
        key = image_key(image)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        d = self.base.predict(image)
        self._cache[key] = d
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return d

    def predict(self, image: Panorama) -> DepthMap:
        return apply_correction(self.base_predict(image), self.params)

    def parameters(self):
        return self.params

    def with_params(self, params: CorrectionParams) -> "CalibratedPredictor":
        return CalibratedPredictor(self.base, params, self.cache_size, self._cache)


@dataclass
class CalibConfig:
    steps: int = 80
    lr: float = 1.0
    n_aug: int = 10
    n_fwd: int = 25
    fd_epsilon: float = 1e-2
    batch: int = 4
    seed: int = 0
    # halvings tried when a step does not lower the batch loss
    backtrack: int = 6
    # Levenberg damping added to the curvature diagonal, relative
    damping: float = 0.1
    # leading steps that move only the global scale
    scale_warmup: int = 60
    # largest change of any optimizer coordinate in one step
    max_step: float = 0.03

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.n_aug < 0:
            raise ValueError("n_aug must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.fd_epsilon <= 0:
            raise ValueError("fd_epsilon must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class TraceRow:
    step: int
    loss: float
    params: CorrectionParams

    def as_row(self) -> str:
        p = self.params
        bias = ",".join(repr(b) for b in p.band_bias)
        return f"{self.step},{self.loss!r},{p.log_scale!r},{p.gamma!r},{bias}"


def trace_csv(trace: list, bands: int = 4) -> str:
    head = "step,loss,log_scale,gamma," + ",".join(f"band_bias_{i}" for i in range(bands))
    return "\n".join([head] + [r.as_row() for r in trace]) + "\n"


@dataclass
class CalibResult:
    params: CorrectionParams
    trace: list = field(default_factory=list)
    n_images: int = 0


def _streams(seed: int):
    aug, loss, order = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(aug), np.random.default_rng(loss), np.random.default_rng(order)


def augment(image: Panorama, d_hat: DepthMap, cfg: LossConfig, rng) -> Panorama:
    """One synthetic training view: a warp for in-band mean depth, otherwise a stretch
    that moves the scene toward the band."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    avg = d_hat.mean()
    s = cfg.sigma
    if avg > cfg.delta2:
        return stretch_image(image, rng.uniform(s * s, s))
    if avg < cfg.delta1:
        return stretch_image(image, rng.uniform(1.0 / s, 1.0 / (s * s)))
    pose = sample_perturb_pose(cfg.perturb, rng)
    return warp_panorama(image, d_hat, pose, cfg.fill_radius).image


def augment_branch(avg: float, cfg: LossConfig) -> str:
    if avg > cfg.delta2:
        return "shrink"
    if avg < cfg.delta1:
        return "enlarge"
    return "warp"


class _Targets:
    """Lazy per-image view of the objective's stretch-target cache."""

    def __init__(self, obj, i: int):
        self.obj, self.i = obj, i

    def __contains__(self, k) -> bool:
        return True

    def __getitem__(self, k):
        cache = self.obj._targets
        key = (self.i, k)
        if key not in cache:
            cache[key] = stretch_target(self.obj.images[self.i], self.obj.teacher, k)
        return cache[key]


class _Objective:
    """Mean total loss over a fixed image set, with cached stretch targets.

    Stretch targets come from the predictor as it stood when calibration
    started, so the scale signal cannot be cancelled by moving the targets.
    The same frozen predictor decides which images get a stretch term, which
    keeps the objective continuous in the parameters.
    """

    def __init__(self, predictor: CalibratedPredictor, images: list, loss_cfg: LossConfig):
        self.predictor = predictor
        self.images = images
        self.cfg = loss_cfg
        self.teacher = predictor.with_params(predictor.params)
        self._targets: dict = {}
        self._gates: dict = {}

    def gate(self, i: int) -> float:
        if i not in self._gates:
            self._gates[i] = self.teacher.predict(self.images[i]).mean()
        return self._gates[i]

    def targets(self, i: int) -> "_Targets":
        return _Targets(self, i)

    def report(self, i: int, params: CorrectionParams, seed: int) -> LossReport:
        p = self.predictor.with_params(params)
        return total_loss(p, self.images[i], self.cfg, seed, teacher=self.teacher, targets=self.targets(i),
                          gate_mean=self.gate(i))

    def value(self, idx, params: CorrectionParams, seeds) -> float:
        return float(np.mean([self.report(i, params, s).total for i, s in zip(idx, seeds)]))

    def curvature(self, idx, params: CorrectionParams, log_ref: float) -> np.ndarray:
        """Gauss-Newton matrix in optimizer coordinates, treating every loss
        term as a squared depth residual."""
        bands = len(params.band_bias)
        h = np.zeros((2 + bands, 2 + bands))
        for i in idx:
            base = self.predictor.base_predict(self.images[i])
            m = base.valid
            b = base.depth[m]
            d = params.scale * np.power(b, params.gamma)
            terms = 1 + len(self.cfg.stretch_factors(self.gate(i)))
            rows = np.broadcast_to(band_index(base.height, bands)[:, None], m.shape)[m]
            jac = np.zeros((len(b), 2 + bands))
            jac[:, 0] = d
            jac[:, 1] = d * (np.log(b) - log_ref)
            jac[np.arange(len(b)), 2 + rows] = 1.0
            h += terms * (jac.T @ jac) / len(b)
        return 2.0 * h / len(idx)


# Optimization runs in coordinates where the scale and exponent are decoupled:
# exp(a) * m * (base / m)**g == exp(a - (g - 1) * log m) * base**g.
def _to_vec(p: CorrectionParams, log_ref: float) -> np.ndarray:
    return np.array([p.log_scale + (p.gamma - 1.0) * log_ref, p.gamma, *p.band_bias])


def _from_vec(x: np.ndarray, log_ref: float) -> CorrectionParams:
    return CorrectionParams(x[0] - (x[1] - 1.0) * log_ref, x[1], tuple(x[2:])).projected()


def fd_gradient(f, x: np.ndarray, eps: float, active=None) -> np.ndarray:
    """Central differences with a relative step ``eps * max(|x_i|, 1)``.

    Coordinates outside ``active`` get a zero entry.
    """
    g = np.zeros_like(x)
    for i in range(len(x)) if active is None else active:
        h = eps * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _reference_log_depth(predictor: CalibratedPredictor, images: list) -> float:
    vals = []
    for im in images:
        d = predictor.base_predict(im)
        if not d.valid.any():
            raise CalibrationError("base predictor returned no valid depth")
        vals.append(np.log(d.depth[d.valid]).mean())
    return float(np.mean(vals))


def _descend(obj: _Objective, params: CorrectionParams, cfg: CalibConfig, idx, seeds,
             log_ref: float, active=None) -> tuple[CorrectionParams, float]:
    """One projected, backtracked, curvature-preconditioned step on the batch ``idx``,
    moving only the ``active`` coordinates."""
    x = _to_vec(params, log_ref)
    active = np.arange(len(x)) if active is None else np.asarray(active)

    def f(v):
        return obj.value(idx, _from_vec(v, log_ref), seeds)

    f0 = f(x)
    if not np.isfinite(f0):
        raise CalibrationError("loss is not finite")
    grad = fd_gradient(f, x, cfg.fd_epsilon, active)[active]
    if not np.all(np.isfinite(grad)):
        raise CalibrationError("gradient is not finite")
    h = obj.curvature(idx, params, log_ref)[np.ix_(active, active)]
    h = h + cfg.damping * np.diag(np.diag(h)) + 1e-12 * np.eye(len(h))
    step = np.zeros_like(x)
    step[active] = np.linalg.solve(h, grad)
    # trust region: cap the largest coordinate change per step
    big = np.max(np.abs(step)) * cfg.lr
    if big > cfg.max_step:
        step *= cfg.max_step / big
    lr = cfg.lr
    for _ in range(cfg.backtrack + 1):
        cand = _from_vec(x - lr * step, log_ref)
        if f(_to_vec(cand, log_ref)) <= f0:
            return cand, f0
        lr *= 0.5
    return params, f0


def _check_finite(loss: float, trace: list) -> None:
    if not np.isfinite(loss):
        raise CalibrationError("calibration diverged: loss is not finite", trace)


def calibrate_set(predictor: CalibratedPredictor, images: list, cfg: CalibConfig, loss_cfg: LossConfig,
                  steps: int | None = None) -> CalibResult:
    """Gradient descent on the mean total loss over ``images`` (no augmentation)."""
    if not images:
        raise CalibrationError("need at least one image")
    steps = cfg.steps if steps is None else steps
    params = predictor.params.projected()
    trace: list = []
    if steps == 0:
        return CalibResult(predictor.params, trace, len(images))
    _, loss_rng, order_rng = _streams(cfg.seed)
    obj = _Objective(predictor.with_params(params), images, loss_cfg)
    log_ref = _reference_log_depth(predictor, images)
    n = len(images)
    batch = min(cfg.batch, n)
    perm, pos = order_rng.permutation(n), 0
    for step in range(steps):
        if pos + batch > n:
            perm, pos = order_rng.permutation(n), 0
        idx = perm[pos:pos + batch]
        pos += batch
        seeds = loss_rng.integers(0, 2**63, size=batch)
        try:
            active = [0] if step < cfg.scale_warmup else None
            params, loss = _descend(obj, params, cfg, idx, seeds, log_ref, active)
        except (CalibrationError, EmptyCloudError) as exc:
            raise CalibrationError(str(exc), trace) from None
        _check_finite(loss, trace)
        trace.append(TraceRow(step, loss, params))
    return CalibResult(params, trace, n)


def augmented_set(predictor: CalibratedPredictor, images: list, cfg: CalibConfig, loss_cfg: LossConfig,
                  keep_originals: bool = True) -> list:
    aug_rng, _, _ = _streams(cfg.seed)
    out = []
    for im in images:
        if keep_originals:
            out.append(im)
        d = predictor.predict(im)
        out.extend(augment(im, d, loss_cfg, aug_rng) for _ in range(cfg.n_aug))
    return out


def calibrate_offline(predictor: CalibratedPredictor, images: list, cfg: CalibConfig,
                      loss_cfg: LossConfig | None = None) -> CalibResult:
    """Augment every image ``n_aug`` times, then fit the correction on the whole set."""
    loss_cfg = loss_cfg or LossConfig()
    if not images:
        raise CalibrationError("need at least one image")
    if cfg.steps == 0:
        return CalibResult(predictor.params, [], len(images))
    train = augmented_set(predictor, images, cfg, loss_cfg)
    return calibrate_set(predictor, train, cfg, loss_cfg)


def _stream_seed(seed: int, image: Panorama) -> int:
    return int.from_bytes(hashlib.sha1(seed.to_bytes(8, "little", signed=True) + image_key(image)).digest()[:8],
                          "little")


def calibrate_online(predictor: CalibratedPredictor, stream, cfg: CalibConfig, loss_cfg: LossConfig | None = None):
    """Yield ``(depth, params, report)`` per image, then take one step on that image.

    The generator returns the parameters after the last step.

    ``depth`` and ``report`` use the parameters in force before the step. The
    perturbation pose is seeded from the image content, so a repeated image is
    scored against the same synthetic view every time.
    """
    loss_cfg = loss_cfg or LossConfig()
    params = predictor.params.projected()
    obj = None
    seen = 0
    for image in stream:
        current = predictor.with_params(params)
        if obj is None:
            obj = _Objective(current, [], loss_cfg)
            log_ref = _reference_log_depth(predictor, [image])
        obj.images.append(image)
        i = len(obj.images) - 1
        seed = _stream_seed(cfg.seed, image)
        report = obj.report(i, params, seed)
        _check_finite(report.total, [])
        yield current.predict(image), params, report
        params, _ = _descend(obj, params, cfg, [i], [seed], log_ref)
        seen += 1
    if seen == 0:
        raise CalibrationError("image stream is empty")
    return params


FORWARD = "forward"


def forward_frames(agent_log: list, n_fwd: int) -> list:
    """The first ``n_fwd`` panoramas observed right after a forward action."""
    frames = [pano for pano, action in agent_log if action == FORWARD]
    if len(frames) < n_fwd:
        raise CalibrationError(f"need {n_fwd} post-forward frames, log has {len(frames)} "
                               f"({n_fwd - len(frames)} short)")
    return frames[:n_fwd]


def navigation_calibration(predictor: CalibratedPredictor, agent_log: list, cfg: CalibConfig,
                           loss_cfg: LossConfig | None = None) -> CalibResult:
    """Offline calibration on the first ``n_fwd`` post-forward frames.

    The ``n_fwd x n_aug`` synthesized views are trained together with the
    cached frames themselves, as in :func:`calibrate_offline`.
    """
    loss_cfg = loss_cfg or LossConfig()
    if cfg.n_aug < 1:
        raise CalibrationError("navigation calibration needs n_aug >= 1")
    frames = forward_frames(agent_log, cfg.n_fwd)
    train = augmented_set(predictor, frames, cfg, loss_cfg)
    return calibrate_set(predictor, train, cfg, loss_cfg, steps=min(cfg.steps, NAV_STEP_CAP))


def profile_config(profile: str, **overrides) -> CalibConfig:
    """Defaults for each CLI profile; point-goal navigation caches only 3 frames."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    base = {"n_fwd": 3 if profile == "nav-pointgoal" else 25}
    if profile.startswith("nav-"):
        # short, scale-only episodes: a few dozen frames pin the scale but not the exponent
        base.update(steps=40, scale_warmup=40)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return CalibConfig(**base)
