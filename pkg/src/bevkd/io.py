"""File formats: binary BEV grids, scene JSON and PGM heatmaps.

Binary grid layout (all little-endian)::

    offset  size  field
    0       4     magic b"BEVG"
    4       2     u16 format version (1)
    6       2     u16 dtype tag (1 = float32, 2 = float64)
    8       12    u32 C, H, W
    20      8     f64 x0
    28      8     f64 y0
    36      8     f64 cell_size
    44      ...   C*H*W values, row-major (C slowest, W fastest)
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .geometry import ObjectBox
from .masks import GridSpec, MaskGrid
from .synth import SceneFrame

MAGIC = b"BEVG"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHH3I3d")
BOX_KEYS = ("cx", "cy", "heading", "length", "width", "vx", "vy")


class FormatError(ValueError):
    """Raised for malformed grid, scene or config files."""


def _dtype_tag(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<")
    for tag, d in DTYPE_TAGS.items():
        if d == dt:
            return tag
    raise ValueError(f"unsupported grid dtype {dtype}; use float32 or float64")


def encode_grid(data: np.ndarray, grid: GridSpec, dtype="float32") -> bytes:
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != grid.shape:
        raise ValueError(f"data shape {arr.shape} does not match grid {grid.shape}")
    tag = _dtype_tag(dtype)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
    c, h, w = arr.shape
    return _HEADER.pack(MAGIC, VERSION, tag, c, h, w, grid.x0, grid.y0, grid.cell_size) + payload


def decode_grid(buf: bytes) -> tuple[np.ndarray, GridSpec]:
    """Inverse of :func:`encode_grid`; returns ``((C, H, W) array, grid)``."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated grid header")
    magic, version, tag, c, h, w, x0, y0, cell = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported grid format version {version}")
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    dt = DTYPE_TAGS[tag]
    expected = c * h * w * dt.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    try:
        grid = GridSpec(h, w, x0, y0, cell)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    data = np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy()
    return data, grid


def write_grid(path, data: np.ndarray, grid: GridSpec, dtype="float32") -> None:
    Path(path).write_bytes(encode_grid(data, grid, dtype))


def read_grid(path) -> tuple[np.ndarray, GridSpec]:
    return decode_grid(Path(path).read_bytes())


def write_mask(path, mask: MaskGrid, dtype="float32") -> None:
    write_grid(path, mask.values, mask.grid, dtype)


def read_mask(path) -> MaskGrid:
    data, grid = read_grid(path)
    if data.shape[0] != 1:
        raise FormatError(f"mask file must have one channel, found {data.shape[0]}")
    return MaskGrid(grid, data[0].astype(float))


def scene_to_dict(frame: SceneFrame) -> dict:
    return {
        "timestamp": frame.timestamp,
        "boxes": [{k: getattr(b, k) for k in BOX_KEYS} for b in frame.boxes],
    }


def scene_from_dict(d) -> SceneFrame:
    if not isinstance(d, dict) or set(d) != {"timestamp", "boxes"}:
        raise FormatError("scene must be an object with exactly 'timestamp' and 'boxes'")
    if not isinstance(d["boxes"], list):
        raise FormatError("'boxes' must be a list")
    boxes = []
    for i, b in enumerate(d["boxes"]):
        if not isinstance(b, dict) or set(b) != set(BOX_KEYS):
            raise FormatError(f"box {i} must have exactly the keys {list(BOX_KEYS)}")
        vals = [b[k] for k in BOX_KEYS]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            raise FormatError(f"box {i} has non-numeric fields")
        try:
            boxes.append(ObjectBox(*(float(v) for v in vals)))
        except ValueError as exc:
            raise FormatError(f"box {i}: {exc}") from exc
    ts = d["timestamp"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
        raise FormatError("timestamp must be a finite number")
    return SceneFrame(float(ts), tuple(boxes))


def dumps_scene(frame: SceneFrame) -> str:
    return json.dumps(scene_to_dict(frame), indent=2) + "\n"


def write_scene(path, frame: SceneFrame) -> None:
    Path(path).write_text(dumps_scene(frame))


def read_scene(path) -> SceneFrame:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return scene_from_dict(data)


def to_pgm(values: np.ndarray, scale: float | None = 1.0) -> bytes:
    """8-bit binary PGM (P5). ``value / scale`` is clipped to [0, 1] and mapped to 0..255.

    ``scale=None`` normalizes by the array maximum. Row 0 is the top image row.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if scale is None:
        peak = float(v.max()) if v.size else 0.0
        scale = peak if peak > 0 else 1.0
    pix = np.rint(np.clip(v / scale, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path, values: np.ndarray, scale: float | None = 1.0) -> None:
    Path(path).write_bytes(to_pgm(values, scale))


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError("only the P5 layout written by write_pgm is supported")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
