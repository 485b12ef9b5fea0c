"""PCD v0.7 reader/writer (ascii and little-endian binary, FIELDS x y z [intensity]).

The writer stores the cloud stamp and frame id as ``# stamp`` / ``# frame_id``
comment lines after the version banner. Other readers skip comments, and
:func:`read_pcd` picks them up when present.
"""
from __future__ import annotations

import io
import os

import numpy as np

from .errors import DataError, MissingInputError
from .geometry import PointCloud

_NUMPY_TYPES = {
    ("F", 4): "<f4",
    ("F", 8): "<f8",
    ("I", 1): "<i1",
    ("I", 2): "<i2",
    ("I", 4): "<i4",
    ("I", 8): "<i8",
    ("U", 1): "<u1",
    ("U", 2): "<u2",
    ("U", 4): "<u4",
    ("U", 8): "<u8",
}


def write_pcd(path, cloud: PointCloud, binary=True, size=4):
    """Write ``cloud`` to ``path``; ``size`` is 4 (float32) or 8 (float64)."""
    if size not in (4, 8):
        raise ValueError("size must be 4 or 8")
    fields = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.intensity is not None:
        fields.append("intensity")
        cols.append(cloud.intensity[:, None])
    data = np.hstack(cols) if len(cloud) else np.zeros((0, len(fields)))
    n = data.shape[0]
    nf = len(fields)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        f"# stamp {cloud.stamp!r}",
        f"# frame_id {cloud.frame_id}",
        "VERSION 0.7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join([str(size)] * nf),
        "TYPE " + " ".join(["F"] * nf),
        "COUNT " + " ".join(["1"] * nf),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA " + ("binary" if binary else "ascii"),
    ]
    dtype = "<f4" if size == 4 else "<f8"
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype=dtype).tobytes())
        else:
            fmt = "%.9g" if size == 4 else "%.17g"
            buf = io.StringIO()
            np.savetxt(buf, data.astype(dtype), fmt=fmt, delimiter=" ")
            fh.write(buf.getvalue().encode("ascii"))


def _parse_header(fh):
    meta = {}
    comments = {}
    while True:
        raw = fh.readline()
        if not raw:
            raise DataError("PCD header ended without a DATA line")
        line = raw.decode("ascii", errors="replace").strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split(None, 1)
            if parts and parts[0] in ("stamp", "frame_id"):
                comments[parts[0]] = parts[1] if len(parts) > 1 else ""
            continue
        key, _, value = line.partition(" ")
        meta[key.upper()] = value.split()
        if key.upper() == "DATA":
            return meta, comments


def read_pcd(path) -> PointCloud:
    if not os.path.exists(path):
        raise MissingInputError(f"no such PCD file: {path}")
    with open(path, "rb") as fh:
        meta, comments = _parse_header(fh)
        fields = meta.get("FIELDS")
        if not fields:
            raise DataError(f"{path}: missing FIELDS")
        nf = len(fields)
        sizes = [int(s) for s in meta.get("SIZE", ["4"] * nf)]
        types = meta.get("TYPE", ["F"] * nf)
        counts = [int(c) for c in meta.get("COUNT", ["1"] * nf)]
        npts = int(meta.get("POINTS", meta.get("WIDTH", ["0"]))[0])
        if "HEIGHT" in meta and "WIDTH" in meta and "POINTS" not in meta:
            npts = int(meta["WIDTH"][0]) * int(meta["HEIGHT"][0])
        kind = meta["DATA"][0].lower()
        for name in ("x", "y", "z"):
            if name not in fields:
                raise DataError(f"{path}: field {name!r} missing")
        if kind == "binary":
            try:
                dtype = np.dtype(
                    [
                        (f, _NUMPY_TYPES[(t.upper(), s)], (c,)) if c > 1 else (f, _NUMPY_TYPES[(t.upper(), s)])
                        for f, t, s, c in zip(fields, types, sizes, counts)
                    ]
                )
            except KeyError as exc:
                raise DataError(f"{path}: unsupported field type {exc}") from None
            raw = fh.read(dtype.itemsize * npts)
            if len(raw) < dtype.itemsize * npts:
                raise DataError(f"{path}: truncated binary payload")
            arr = np.frombuffer(raw, dtype=dtype, count=npts)
            columns = {f: arr[f].astype(float) for f in fields}
        elif kind == "ascii":
            text = fh.read().decode("ascii")
            total = sum(counts)
            values = np.array(text.split(), dtype=float)
            if values.size < total * npts:
                raise DataError(f"{path}: truncated ascii payload")
            values = values[: total * npts].reshape(npts, total) if npts else np.zeros((0, total))
            offsets = np.cumsum([0] + counts)
            columns = {}
            for i, (f, t, sz) in enumerate(zip(fields, types, sizes)):
                col = values[:, offsets[i]]
                if (t.upper(), sz) == ("F", 4):
                    col = col.astype(np.float32).astype(float)  # value as stored
                columns[f] = col
        else:
            raise DataError(f"{path}: unsupported DATA kind {kind!r}")
    pts = np.column_stack([columns["x"], columns["y"], columns["z"]]) if npts else np.zeros((0, 3))
    intensity = columns.get("intensity")
    stamp = float(comments.get("stamp", 0.0))
    return PointCloud(pts, stamp, comments.get("frame_id", ""), intensity if npts else None)
