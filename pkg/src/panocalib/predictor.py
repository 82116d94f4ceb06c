"""Depth predictors: the interface, a ground-truth oracle with injected
corruptions, a subprocess adapter, and image-domain shifts."""
from __future__ import annotations

import hashlib
import subprocess
from dataclasses import dataclass, field

import numpy as np

from . import io as pio
from .geometry import DepthMap, Panorama, Pose, colatitude, dirs_to_pixels, rot_x, rot_y, rot_z, sphere_grid


class PredictorError(RuntimeError):
    pass


class DepthPredictor:
    """Anything with ``predict(Panorama) -> DepthMap``."""

    def predict(self, image: Panorama) -> DepthMap:
        raise NotImplementedError

    def parameters(self):
        return None


@dataclass
class CorruptionSpec:
    """Structured depth error: ``scale * gt**gamma_d + latitude_bias * cos(psi) + noise``.

    ``domain`` restricts where the error applies, judged by the mean true depth
    of the depicted geometry against ``band``: ``all``, ``large`` (above),
    ``small`` (below) or ``out_of_band`` (either). Inside the band the
    predictor behaves like a network on its training distribution.
    """

    scale: float = 1.0
    gamma_d: float = 1.0
    latitude_bias: float = 0.0
    noise_std: float = 0.0
    domain: str = "all"
    band: tuple = (1.0, 2.5)

    def __post_init__(self) -> None:
        if self.scale <= 0 or self.gamma_d <= 0:
            raise ValueError("scale and gamma_d must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.domain not in ("all", "large", "small", "out_of_band"):
            raise ValueError(f"unknown corruption domain {self.domain!r}")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.gamma_d == 1.0 and self.latitude_bias == 0.0 and self.noise_std == 0.0

    def applies_to(self, truth: DepthMap) -> bool:
        if self.domain == "all":
            return True
        avg = truth.mean()
        lo, hi = self.band
        return {
            "large": avg > hi,
            "small": avg < lo,
            "out_of_band": avg > hi or avg < lo,
        }[self.domain]

    @classmethod
    def parse(cls, text: str) -> "CorruptionSpec":
        """``"scale=1.3,gamma_d=1.1,domain=large"`` style key=value list."""
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            key = key.strip()
            if key == "domain":
                kw[key] = val.strip()
            elif key in ("scale", "gamma_d", "latitude_bias", "noise_std"):
                kw[key] = float(val)
            else:
                raise ValueError(f"unknown corruption key {key!r}")
        return cls(**kw)


def _seed_from(arr: np.ndarray) -> int:
    return int.from_bytes(hashlib.sha1(np.ascontiguousarray(arr).tobytes()).digest()[:8], "little")


def apply_corruption(gt: DepthMap, spec: CorruptionSpec, seed: int | None = None) -> DepthMap:
    if spec.is_identity or not spec.applies_to(gt):
        return DepthMap(gt.depth.copy(), gt.valid.copy())
    d = gt.filled(1.0)
    out = spec.scale * np.power(d, spec.gamma_d)
    if spec.latitude_bias:
        psi = colatitude(np.arange(gt.height), gt.height)
        out = out + spec.latitude_bias * np.cos(psi)[:, None]
    if spec.noise_std > 0:
        rng = np.random.default_rng(_seed_from(gt.filled(0.0)) if seed is None else seed)
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    return DepthMap(np.maximum(out, 1e-3), gt.valid)


class OraclePredictor(DepthPredictor):
    """Ground truth plus a :class:`CorruptionSpec`.

    Truth comes from the image's attached ``truth`` raster, which synthesis
    operators propagate, or from the scene registry of rendered panoramas.
    Output is masked to the pixels where truth is defined.
    """

    def __init__(self, corruption: CorruptionSpec | None = None, scene=None):
        self.corruption = corruption or CorruptionSpec()
        self.scene = scene
        self.calls = 0

    def truth_for(self, image: Panorama) -> DepthMap:
        if image.truth is not None:
            return image.truth
        if self.scene is not None:
            found = self.scene.lookup_image(image)
            if found is not None:
                return found
        raise PredictorError("no ground truth available for this image")

    def predict(self, image: Panorama) -> DepthMap:
        self.calls += 1
        return apply_corruption(self.truth_for(image), self.corruption)


def mock_predict(scene, pose: Pose, corruption: CorruptionSpec, image: Panorama | None = None) -> DepthMap:
    """Corrupted ground truth for a panorama previously rendered at ``pose``."""
    try:
        _, gt = scene.lookup(pose)
    except KeyError as exc:
        raise PredictorError(str(exc)) from None
    if image is not None and image.rgb.shape[:2] != gt.depth.shape:
        raise PredictorError("image does not match the registered render")
    return apply_corruption(gt, corruption)


class SubprocessPredictor(DepthPredictor):
    """External predictor speaking length-prefixed PNG -> PDR1 over stdin/stdout.

    Each message is a u64 little-endian byte count followed by the payload.
    """

    def __init__(self, command: list[str] | str):
        self.command = command
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     shell=isinstance(command, str))

    def predict(self, image: Panorama) -> DepthMap:
        if self.proc.poll() is not None:
            raise PredictorError(f"predictor process exited with {self.proc.returncode}")
        pio.write_frame(self.proc.stdin, pio.encode_panorama(image))
        reply = pio.read_frame(self.proc.stdout)
        if reply is None:
            raise PredictorError("predictor closed its output")
        depth = pio.decode_pdr(reply)
        if depth.depth.shape != image.rgb.shape[:2]:
            raise PredictorError("predictor returned a depth map of the wrong size")
        return depth

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)


def serve(predictor: DepthPredictor, stdin, stdout) -> int:
    """Answer framed requests until EOF; returns the number served."""
    n = 0
    while True:
        req = pio.read_frame(stdin)
        if req is None:
            return n
        pio.write_frame(stdout, pio.encode_pdr(predictor.predict(pio.decode_panorama(req))))
        n += 1


SHIFT_KINDS = ("low_light", "white_balance", "gamma", "speckle", "gaussian", "salt_pepper", "rotation")


@dataclass
class ImageShiftSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown image shift {self.kind!r}")

    def param(self, name: str):
        defaults = {
            "low_light": {"factor": 0.75},
            "white_balance": {"gains": (0.7, 0.9, 0.8)},
            "gamma": {"gamma": 1.5},
            "speckle": {"var": 0.06},
            "gaussian": {"var": 0.005},
            "salt_pepper": {"amount": 0.005},
            "rotation": {"max_roll": np.pi / 8, "max_pitch": np.pi / 8},
        }[self.kind]
        return self.params.get(name, defaults[name])


def sample_bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coords; wraps in u, clamps in v."""
    h, w = img.shape[:2]
    u0 = np.floor(u).astype(np.int64)
    v = np.clip(v, 0.0, h - 1.0)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 1)
    fu = (u - u0)[..., None] if img.ndim == 3 else u - u0
    fv = (v - v0)[..., None] if img.ndim == 3 else v - v0
    u1 = np.mod(u0 + 1, w)
    u0 = np.mod(u0, w)
    v1 = np.minimum(v0 + 1, h - 1)
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def rotate_panorama(image: Panorama, rotation: np.ndarray) -> Panorama:
    """Re-render the panorama from a camera rotated by ``rotation`` about its center."""
    grid = sphere_grid(image.height, image.width)
    src = grid @ np.asarray(rotation).T
    u, v = dirs_to_pixels(src, image.width, image.height)
    rgb = np.clip(sample_bilinear(image.rgb, u, v), 0.0, 1.0)
    truth = None
    if image.truth is not None:
        ui = np.mod(np.rint(u).astype(np.int64), image.width)
        vi = np.clip(np.rint(v).astype(np.int64), 0, image.height - 1)
        truth = DepthMap(image.truth.depth[vi, ui], image.truth.valid[vi, ui])
    return Panorama(rgb, truth)


def shift_image(image: Panorama, spec: ImageShiftSpec, rng: np.random.Generator) -> Panorama:
    """Appearance-only domain shift; results are clamped to [0, 1]."""
    x = image.rgb
    kind = spec.kind
    if kind == "low_light":
        out = x * spec.param("factor")
    elif kind == "white_balance":
        out = x @ np.diag(spec.param("gains"))
    elif kind == "gamma":
        out = np.power(x, spec.param("gamma"))
    elif kind == "speckle":
        out = x + x * rng.normal(0.0, np.sqrt(spec.param("var")), size=x.shape)
    elif kind == "gaussian":
        out = x + rng.normal(0.0, np.sqrt(spec.param("var")), size=x.shape)
    elif kind == "salt_pepper":
        hit = rng.random(x.shape[:2]) < spec.param("amount")
        salt = rng.random(x.shape[:2]) < 0.5
        out = x.copy()
        out[hit] = np.where(salt[hit], 1.0, 0.0)[:, None]
    else:
        yaw = rng.uniform(-np.pi, np.pi)
        roll = rng.uniform(-spec.param("max_roll"), spec.param("max_roll"))
        pitch = rng.uniform(-spec.param("max_pitch"), spec.param("max_pitch"))
        return rotate_panorama(image, rot_z(yaw) @ rot_y(pitch) @ rot_x(roll))
    return Panorama(np.clip(out, 0.0, 1.0), image.truth)
