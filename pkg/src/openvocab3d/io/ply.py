"""Minimal binary-little-endian PLY reader/writer.

Only the vertex element is supported. The writer emits float32 x/y/z,
optionally an int32 instance_id and uchar red/green/blue, always in that
property order, so exports are byte-identical across runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import InputFormatError
from ..validation import as_points_array

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "char": "<i1",
    "int8": "<i1",
    "uchar": "<u1",
    "uint8": "<u1",
}


def read_ply(path) -> dict[str, np.ndarray]:
    """Parse a binary-little-endian PLY vertex cloud into property arrays."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from exc

    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise InputFormatError(f"{path}: not a PLY file")
    header = raw[: end + len(b"end_header\n")]
    body = raw[len(header):]

    fmt = None
    count = None
    names: list[str] = []
    types: list[str] = []
    in_vertex = False
    for line in header.decode("ascii", errors="replace").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is None:
                raise InputFormatError(f"{path}: unsupported element {parts[1]!r} before vertex")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise InputFormatError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_DTYPES:
                raise InputFormatError(f"{path}: unsupported property type {parts[1]!r}")
            types.append(_PLY_DTYPES[parts[1]])
            names.append(parts[2])
    if fmt != "binary_little_endian":
        raise InputFormatError(f"{path}: only binary_little_endian PLY is supported, got {fmt!r}")
    if count is None or not names:
        raise InputFormatError(f"{path}: missing vertex element")

    dtype = np.dtype(list(zip(names, types)))
    expected = count * dtype.itemsize
    if len(body) < expected:
        raise InputFormatError(
            f"{path}: truncated payload ({len(body)} bytes, need {expected})"
        )
    table = np.frombuffer(body[:expected], dtype=dtype)
    return {name: np.ascontiguousarray(table[name]) for name in names}


def read_point_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Points as (N, 3) float64 plus the instance_id column when present."""
    props = read_ply(path)
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise InputFormatError(f"{path}: vertex property {axis!r} missing")
    points = np.column_stack([props["x"], props["y"], props["z"]]).astype(np.float64)
    ids = props.get("instance_id")
    if ids is not None:
        ids = ids.astype(np.int64)
    return points, ids


def write_ply(path, points, instance_ids=None, colors=None) -> None:
    """Write a binary-little-endian vertex cloud.

    ``colors`` is an (N, 3) uint8 array; ``instance_ids`` an (N,) integer
    array. Property order is fixed: x y z [instance_id] [red green blue].
    """
    points = as_points_array(points)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if instance_ids is not None:
        instance_ids = np.asarray(instance_ids, dtype=np.int64)
        if instance_ids.shape != (len(points),):
            raise InputFormatError("instance_ids must align with points")
        if instance_ids.size and (
            instance_ids.max() > np.iinfo(np.int32).max or instance_ids.min() < np.iinfo(np.int32).min
        ):
            raise InputFormatError("instance ids exceed the int32 range of the PLY schema")
        fields.append(("instance_id", "<i4"))
        header.append("property int instance_id")
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (len(points), 3):
            raise InputFormatError("colors must have shape (N, 3)")
        fields += [("red", "<u1"), ("green", "<u1"), ("blue", "<u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")

    table = np.empty(len(points), dtype=np.dtype(fields))
    table["x"] = points[:, 0].astype("<f4")
    table["y"] = points[:, 1].astype("<f4")
    table["z"] = points[:, 2].astype("<f4")
    if instance_ids is not None:
        table["instance_id"] = instance_ids.astype("<i4")
    if colors is not None:
        table["red"] = colors[:, 0].astype("<u1")
        table["green"] = colors[:, 1].astype("<u1")
        table["blue"] = colors[:, 2].astype("<u1")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())
