"""File formats shared by the pipeline stages.

* 8-bit PNG images (loaded as float in [0, 1]),
* PFM float rasters (float32, little-endian, NaN-capable) for depth/disparity,
* binary little-endian PLY point clouds,
* TUM-style trajectory text files ``t x y z qx qy qz qw``,
* JSON-lines sensor logs ``{"sensor": ..., "t": ..., "payload": {...}}``,
* JSON configs.

All writers are atomic: data goes to a temporary file in the destination
directory which is renamed into place, so readers never observe a partial
file and a crashed run leaves no half-written artifact under the final name.
"""

from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .geom import Pose, Rotation


class FormatError(ValueError):
    """A file does not conform to the expected on-disk format."""


@contextmanager
def atomic_write(path, mode: str = "wb"):
    """Context manager yielding a temp file handle, renamed to `path` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# PNG (8-bit)
# ---------------------------------------------------------------------------


def write_png8(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    image = np.asarray(image, dtype=float)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise FormatError(f"write_png8: expected (H, W) or (H, W, 3), got {image.shape}")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with atomic_write(path) as fh:
        Image.fromarray(data).save(fh, format="PNG")


def read_png8(path) -> np.ndarray:
    """Read an 8-bit PNG as float in [0, 1]; color images come back (H, W, 3)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        data = np.asarray(img)
    return data.astype(float) / 255.0


# ---------------------------------------------------------------------------
# PFM float rasters
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write a float raster (H, W) or (H, W, 3) as little-endian PFM."""
    data = np.asarray(data)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise FormatError(f"write_pfm: expected (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    rows = np.flipud(data).astype("<f4")  # PFM stores rows bottom-to-top
    with atomic_write(path) as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(rows.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM raster as float32 (H, W) or (H, W, 3); NaNs round-trip bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise FormatError(f"read_pfm: bad magic {magic!r}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise FormatError("read_pfm: malformed dimensions line")
        try:
            w, h = int(dims[0]), int(dims[1])
        except ValueError as exc:
            raise FormatError("read_pfm: malformed dimensions line") from exc
        try:
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise FormatError("read_pfm: malformed scale line") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise FormatError(f"read_pfm: truncated payload, expected {count * 4} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape((h, w) if channels == 1 else (h, w, 3))
    return np.flipud(data).astype(np.float32, copy=True)


# ---------------------------------------------------------------------------
# PLY point clouds (binary little-endian)
# ---------------------------------------------------------------------------


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Write an (N, 3) float cloud, optionally with (N, 3) uint8 colors."""
    points = np.ascontiguousarray(np.asarray(points, dtype="<f4"))
    if points.ndim != 2 or points.shape[1] != 3:
        raise FormatError(f"write_ply: expected (N, 3) points, got {points.shape}")
    n = points.shape[0]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != points.shape:
            raise FormatError("write_ply: colors must match points shape")
        colors = colors.astype(np.uint8)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    if colors is None:
        payload = points.tobytes()
    else:
        rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = points
        rec["rgb"] = colors
        payload = rec.tobytes()
    with atomic_write(path) as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload)


def read_ply(path):
    """Read a binary little-endian PLY; returns (points (N, 3) float32, colors or None)."""
    with open(path, "rb") as fh:
        first = fh.readline().strip()
        if first != b"ply":
            raise FormatError("read_ply: missing 'ply' magic")
        n = None
        props: list[tuple[str, str]] = []
        fmt_seen = False
        while True:
            line = fh.readline()
            if not line:
                raise FormatError("read_ply: header ended before end_header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                if tokens[1] != "binary_little_endian":
                    raise FormatError(f"read_ply: unsupported format {tokens[1]}")
                fmt_seen = True
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise FormatError(f"read_ply: unsupported element {tokens[1]}")
                n = int(tokens[2])
            elif tokens[0] == "property":
                props.append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if not fmt_seen or n is None:
            raise FormatError("read_ply: incomplete header")
        names = [p[1] for p in props]
        if names[:3] != ["x", "y", "z"] or any(p[0] != "float" for p in props[:3]):
            raise FormatError(f"read_ply: unsupported vertex layout {props}")
        has_color = names[3:6] == ["red", "green", "blue"]
        if len(props) not in (3, 6) or (len(props) == 6 and not has_color):
            raise FormatError(f"read_ply: unsupported vertex layout {props}")
        dtype = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_color else [])
        rec = np.dtype(dtype)
        raw = fh.read(n * rec.itemsize)
    if len(raw) != n * rec.itemsize:
        raise FormatError(
            f"read_ply: truncated payload, expected {n * rec.itemsize} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=rec)
    points = data["xyz"].astype(np.float32, copy=True)
    colors = data["rgb"].copy() if has_color else None
    return points, colors


# ---------------------------------------------------------------------------
# TUM trajectories
# ---------------------------------------------------------------------------


def write_tum(path, times: np.ndarray, poses: Iterable[Pose]) -> None:
    """Write ``t x y z qx qy qz qw`` lines with 9 significant digits."""
    times = np.asarray(times, dtype=float)
    lines = []
    poses = list(poses)
    if len(poses) != times.shape[0]:
        raise FormatError("write_tum: times and poses length mismatch")
    for t, pose in zip(times, poses):
        w, x, y, z = pose.rotation.q
        px, py, pz = pose.translation
        lines.append(
            f"{t:.9g} {px:.9g} {py:.9g} {pz:.9g} {x:.9g} {y:.9g} {z:.9g} {w:.9g}"
        )
    with atomic_write(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tum(path):
    """Read a TUM trajectory; returns (times (N,), list[Pose])."""
    times = []
    poses = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"read_tum: line {lineno} has {len(parts)} fields, expected 8")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"read_tum: line {lineno} is not numeric") from exc
            t, px, py, pz, qx, qy, qz, qw = vals
            times.append(t)
            poses.append(Pose(Rotation(np.array([qw, qx, qy, qz])), np.array([px, py, pz])))
    return np.asarray(times), poses


# ---------------------------------------------------------------------------
# JSONL sensor logs and JSON configs
# ---------------------------------------------------------------------------


def write_sensor_log(path, records: Iterable[dict]) -> None:
    """Write sensor records ``{"sensor", "t", "payload"}`` as JSON lines."""
    with atomic_write(path, "w") as fh:
        for rec in records:
            if not {"sensor", "t", "payload"} <= rec.keys():
                raise FormatError(f"write_sensor_log: record missing keys: {sorted(rec)}")
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def iter_sensor_log(path) -> Iterator[dict]:
    """Stream records from a JSONL sensor log in file order."""
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"iter_sensor_log: line {lineno} is not valid JSON") from exc
            if not {"sensor", "t", "payload"} <= rec.keys():
                raise FormatError(f"iter_sensor_log: line {lineno} missing required keys")
            yield rec


def read_sensor_log(path) -> list[dict]:
    return list(iter_sensor_log(path))


def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path, "r") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"read_json: {path} is not valid JSON") from exc
