"""Readers and writers for ``.grid`` containers, landmark CSVs and JSON records.

A ``.grid`` file is one UTF-8 JSON header line terminated by ``\\n`` followed
by raw little-endian voxel data, x-fastest, with vector components
interleaved per voxel.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .grid import GridError, ImageGrid, LabelGrid, LandmarkSet, VectorFieldGrid

MAGIC = "ARCGRID1"
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class GridFormatError(GridError):
    """Raised when a ``.grid`` file is malformed."""


def _to_x_fastest(arr: np.ndarray) -> np.ndarray:
    # [x, y, z, c] -> memory order z, y, x, c so x varies fastest per component
    if arr.ndim == 3:
        return np.ascontiguousarray(arr.transpose(2, 1, 0))
    return np.ascontiguousarray(arr.transpose(2, 1, 0, 3))


def encode_grid(grid) -> bytes:
    if isinstance(grid, ImageGrid):
        kind, dtype, comps = "image", "f32", 1
    elif isinstance(grid, LabelGrid):
        kind, dtype, comps = "labels", "u16", 1
        if grid.max_label > 65535:
            raise GridFormatError("labels above 65535 cannot be stored as u16")
    elif isinstance(grid, VectorFieldGrid):
        kind, dtype, comps = "field", "f32", 3
    else:
        raise TypeError(f"cannot encode {type(grid).__name__}")
    header = {
        "magic": MAGIC,
        "kind": kind,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "dtype": dtype,
        "components": comps,
    }
    payload = _to_x_fastest(grid.data).astype(_DTYPES[dtype]).tobytes()
    return (json.dumps(header) + "\n").encode("utf-8") + payload


def decode_grid(blob: bytes, source: str = "<bytes>"):
    nl = blob.find(b"\n")
    if nl < 0:
        raise GridFormatError(f"{source}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFormatError(f"{source}: bad header ({exc})") from None
    if header.get("magic") != MAGIC:
        raise GridFormatError(f"{source}: bad magic {header.get('magic')!r}")
    kind = header.get("kind")
    dtype = _DTYPES.get(header.get("dtype"))
    comps = int(header.get("components", 1))
    if kind not in ("image", "labels", "field") or dtype is None:
        raise GridFormatError(f"{source}: unsupported kind/dtype {kind}/{header.get('dtype')}")
    dims = [int(n) for n in header["dims"]]
    count = int(np.prod(dims)) * comps
    data = np.frombuffer(blob, dtype=dtype, count=-1, offset=nl + 1)
    if data.size != count:
        raise GridFormatError(f"{source}: expected {count} values, found {data.size}")
    nx, ny, nz = dims
    shape = (nz, ny, nx) if comps == 1 else (nz, ny, nx, comps)
    arr = data.reshape(shape)
    arr = arr.transpose(2, 1, 0) if comps == 1 else arr.transpose(2, 1, 0, 3)
    meta = dict(spacing=tuple(header["spacing"]), origin=tuple(header["origin"]))
    if kind == "image":
        return ImageGrid(arr, **meta)
    if kind == "labels":
        return LabelGrid(arr.astype(np.int64), **meta)
    if comps != 3:
        raise GridFormatError(f"{source}: field must have 3 components")
    return VectorFieldGrid(arr.astype(np.float64), **meta)


def write_grid(path, grid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_grid(grid))
    return path


def read_grid(path):
    path = Path(path)
    return decode_grid(path.read_bytes(), str(path))


def write_landmarks(path, lms: LandmarkSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "x", "y", "z"])
    for lid, p in zip(lms.ids, lms.points):
        writer.writerow([lid] + [repr(float(v)) for v in p])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_landmarks(path) -> LandmarkSet:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "x", "y", "z"]:
            raise GridFormatError(f"{path}: landmark header must be id,x,y,z")
        rows = list(reader)
    points = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    return LandmarkSet(points, tuple(r["id"] for r in rows))


def dumps_json(obj) -> str:
    """Stable JSON text (sorted keys, fixed indentation) for byte-identical reruns."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
