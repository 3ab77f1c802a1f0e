"""File formats: PQIS binary series, CSV tables, JSON documents and PGM renders.

PQIS layout (little endian): ``b"PQIS"``, version ``u16``, ``nt, ny, nx``
as ``u32``, pixel spacing ``(dy, dx)`` in mm as ``f32``, then ``nt*ny*nx``
``f32`` samples, frame-major and row-major within a frame. The header is
26 bytes long.
"""

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import SeriesFormatError, ValidationError
from .model import SampledCurve

MAGIC = b"PQIS"
VERSION = 1
_HEADER = struct.Struct("<4sH3I2f")
HEADER_SIZE = _HEADER.size


def series_bytes(frames, spacing=(1.0, 1.0)):
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise ValidationError("series data must be (nt, ny, nx) or a single (ny, nx) map")
    if not np.all(np.isfinite(frames)):
        raise ValidationError("series contains non-finite values")
    nt, ny, nx = frames.shape
    header = _HEADER.pack(MAGIC, VERSION, nt, ny, nx, float(spacing[0]), float(spacing[1]))
    return header + frames.astype("<f4").tobytes(order="C")


def write_series(path, frames, spacing=(1.0, 1.0)):
    Path(path).write_bytes(series_bytes(frames, spacing))


def parse_series(data, name="<bytes>"):
    """Decode PQIS bytes to ``(frames (nt, ny, nx) float64, spacing)``."""
    if len(data) < HEADER_SIZE:
        raise SeriesFormatError(
            f"{name}: truncated header, {len(data)} bytes where {HEADER_SIZE} are required "
            f"(offset {len(data)})")
    magic, version, nt, ny, nx, sy, sx = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SeriesFormatError(f"{name}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise SeriesFormatError(f"{name}: unsupported version {version} at offset 4")
    if min(nt, ny, nx) == 0:
        raise SeriesFormatError(f"{name}: zero dimension in header at offset 6")
    if not (sy > 0 and sx > 0):
        raise SeriesFormatError(f"{name}: non-positive pixel spacing at offset 18")
    expected = HEADER_SIZE + 4 * nt * ny * nx
    if len(data) != expected:
        raise SeriesFormatError(
            f"{name}: file length {len(data)} does not match header, expected {expected} "
            f"(pixel data starts at offset {HEADER_SIZE})")
    frames = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(nt, ny, nx)
    if not np.all(np.isfinite(frames)):
        bad = int(np.flatnonzero(~np.isfinite(frames.ravel()))[0])
        raise SeriesFormatError(f"{name}: non-finite sample at offset {HEADER_SIZE + 4 * bad}")
    return frames.astype(float), (float(sy), float(sx))


def read_series(path):
    path = Path(path)
    return parse_series(path.read_bytes(), str(path))


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "value"])
        for t, v in zip(curve.times, curve.values):
            w.writerow([repr(float(t)), repr(float(v))])


def read_curve_csv(path, kind="aif"):
    rows = _read_table(path, ["time_s", "value"])
    return SampledCurve(rows[:, 0], rows[:, 1], kind)


def write_motion_csv(path, estimate):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "dy_px", "dx_px"])
        for i, dy, dx in estimate.rows():
            w.writerow([i, repr(dy), repr(dx)])


def read_motion_csv(path):
    return _read_table(path, ["frame", "dy_px", "dx_px"])[:, 1:]


def write_roc_csv(path, roc):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "sensitivity", "specificity"])
        for t, se, sp in roc.rows():
            w.writerow([repr(t), repr(se), repr(sp)])


def _read_table(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != header:
        raise ValidationError(f"{path}: expected header {','.join(header)}")
    try:
        return np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float).reshape(
            -1, len(header))
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj):
    """Deterministic JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def render_pgm(image, wmin=None, wmax=None):
    """8-bit binary PGM (P5) bytes with linear window ``[wmin, wmax]``."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValidationError("PGM renders need a 2-D image")
    lo = float(np.min(image)) if wmin is None else float(wmin)
    hi = float(np.max(image)) if wmax is None else float(wmax)
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((image - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    ny, nx = image.shape
    return f"P5\n{nx} {ny}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, image, wmin=None, wmax=None):
    Path(path).write_bytes(render_pgm(image, wmin, wmax))


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    nx, ny = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(ny, nx)
