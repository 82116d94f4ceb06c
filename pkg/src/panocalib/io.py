"""File formats: PDR1 depth rasters, 8-bit PNG panoramas, pose JSON.

PDR1 layout (little-endian)::

    b"PDR1" | u32 width | u32 height | width*height float32, row-major

NaN marks invalid pixels.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import DepthMap, Panorama, Pose

MAGIC = b"PDR1"
_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    pass


def encode_pdr(depth: DepthMap) -> bytes:
    arr = np.where(depth.valid, depth.depth, np.nan).astype("<f4")
    return _HEADER.pack(MAGIC, depth.width, depth.height) + arr.tobytes(order="C")


def decode_pdr(data: bytes) -> DepthMap:
    if len(data) < _HEADER.size:
        raise FormatError("truncated PDR1 header")
    magic, w, h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    need = _HEADER.size + 4 * w * h
    if len(data) != need:
        raise FormatError(f"PDR1 payload is {len(data)} bytes, expected {need}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)
    return DepthMap(arr.astype(np.float64))


def write_pdr(path: str | Path, depth: DepthMap) -> None:
    Path(path).write_bytes(encode_pdr(depth))


def read_pdr(path: str | Path) -> DepthMap:
    return decode_pdr(Path(path).read_bytes())


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def encode_png(arr: np.ndarray) -> bytes:
    """PNG bytes with pinned encoder settings and no metadata chunks."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def encode_panorama(pano: Panorama) -> bytes:
    return encode_png(to_uint8(pano.rgb))


def decode_panorama(data: bytes) -> Panorama:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return Panorama(np.asarray(img, dtype=np.float64) / 255.0)


def write_panorama(path: str | Path, pano: Panorama) -> None:
    Path(path).write_bytes(encode_panorama(pano))


def read_panorama(path: str | Path) -> Panorama:
    return decode_panorama(Path(path).read_bytes())


def write_pose(path: str | Path, pose: Pose) -> None:
    Path(path).write_text(json.dumps(pose.to_json(), sort_keys=True) + "\n")


def read_pose(path: str | Path) -> Pose:
    return Pose.from_json(json.loads(Path(path).read_text()))


def read_poses(path: str | Path) -> list[Pose]:
    """A pose JSON file holding either one pose object or a list of them."""
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, dict):
        obj = [obj]
    return [Pose.from_json(o) for o in obj]


def depth_heatmap(depth: DepthMap, vmax: float | None = None) -> np.ndarray:
    """8-bit RGB visualization: near = bright yellow, far = dark blue, invalid = black."""
    d = depth.filled(np.nan)
    hi = vmax if vmax is not None else (np.nanmax(d) if depth.valid.any() else 1.0)
    t = np.clip(np.nan_to_num(d, nan=hi) / max(hi, 1e-9), 0.0, 1.0)
    rgb = np.stack([1.0 - t, 1.0 - 0.6 * t, 0.2 + 0.5 * t], axis=-1)
    rgb[~depth.valid] = 0.0
    return to_uint8(rgb)


# subprocess predictor framing: u64 little-endian length prefix per message
_LEN = struct.Struct("<Q")


def write_frame(stream, payload: bytes) -> None:
    stream.write(_LEN.pack(len(payload)))
    stream.write(payload)
    stream.flush()


def read_frame(stream) -> bytes | None:
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) != _LEN.size:
        raise FormatError("truncated frame header")
    (n,) = _LEN.unpack(head)
    payload = stream.read(n)
    if len(payload) != n:
        raise FormatError("truncated frame payload")
    return payload
