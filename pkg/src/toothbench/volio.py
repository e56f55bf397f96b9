"""Volume and report I/O.

Native volumes are a JSON sidecar (``<stem>.ctvol.json``) next to a raw
little-endian blob (``<stem>.ctvol.raw``) in z-major order.  NIfTI-1 is
supported read-only, uncompressed single-file (``n+1``) form only.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .metrics import METRIC_FIELDS, MM_FIELDS, PERCENT_FIELDS, CaseReport
from .volume import Spacing, Volume

DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
_DTYPE_NAMES = {np.dtype(np.uint8): "u8", np.dtype(np.int16): "i16", np.dtype(np.float32): "f32"}

HEADER_SUFFIX = ".ctvol.json"
RAW_SUFFIX = ".ctvol.raw"


class VolumeFormatError(ValueError):
    pass


def _stem(path) -> str:
    p = os.fspath(path)
    for suffix in (HEADER_SUFFIX, RAW_SUFFIX):
        if p.endswith(suffix):
            return p[: -len(suffix)]
    return p


def volume_paths(path) -> tuple[Path, Path]:
    """(header, blob) paths for a stem or either member of the pair."""
    stem = _stem(path)
    return Path(stem + HEADER_SUFFIX), Path(stem + RAW_SUFFIX)


def write_volume(v: Volume, path, dtype: str | None = None) -> tuple[Path, Path]:
    """Write ``v`` as a sidecar + blob pair.

    ``dtype`` defaults to the array's own type; float64 data is stored as f32.
    """
    if dtype is None:
        dtype = _DTYPE_NAMES.get(v.data.dtype)
        if dtype is None:
            if v.data.dtype.kind != "f":
                raise VolumeFormatError(f"no native dtype for {v.data.dtype}; pass dtype explicitly")
            dtype = "f32"
    if dtype not in DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    header_path, raw_path = volume_paths(path)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing.as_tuple()),
        "dtype": dtype,
        "order": "zyx",
        "endianness": "little",
        "kind": v.kind,
    }
    blob = np.ascontiguousarray(v.data, dtype=DTYPES[dtype]).tobytes()
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(blob)
    return header_path, raw_path


def _parse_header(text: str, where) -> dict:
    try:
        h = json.loads(text)
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{where}: garbled header: {e}") from None
    if not isinstance(h, dict):
        raise VolumeFormatError(f"{where}: header must be a JSON object")
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in h:
            raise VolumeFormatError(f"{where}: header missing {key!r}")
    dims, spacing = h["dims"], h["spacing_mm"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in dims)):
        raise VolumeFormatError(f"{where}: dims must be three positive integers, got {dims!r}")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f"{where}: spacing_mm must have three entries")
    if h["dtype"] not in DTYPES:
        raise VolumeFormatError(f"{where}: unknown dtype {h['dtype']!r}")
    if h.get("order", "zyx") != "zyx" or h.get("endianness", "little") != "little":
        raise VolumeFormatError(f"{where}: only zyx order and little endianness are supported")
    return h


def read_volume(path) -> Volume:
    header_path, raw_path = volume_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing volume header {header_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing volume blob {raw_path}")
    h = _parse_header(header_path.read_text(), header_path)
    dt = DTYPES[h["dtype"]]
    dims = tuple(h["dims"])
    blob = raw_path.read_bytes()
    expected = math.prod(dims) * dt.itemsize
    if len(blob) != expected:
        raise VolumeFormatError(f"{raw_path}: blob has {len(blob)} bytes, expected {expected} for dims {dims} {h['dtype']}")
    data = np.frombuffer(blob, dtype=dt).reshape(dims)
    try:
        spacing = Spacing(*h["spacing_mm"])
    except (TypeError, ValueError) as e:
        raise VolumeFormatError(f"{header_path}: {e}") from None
    return Volume(data.astype(dt.newbyteorder("="), copy=True), spacing, h.get("kind", "intensity"))


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def read_nifti(path, kind: str = "intensity") -> Volume:
    """Read an uncompressed single-file NIfTI-1 image.

    ``dim[1..3]`` are (x, y, z) with x fastest on disk, so the voxel block
    reshapes directly to (z, y, x).  Intensity scaling (``scl_slope``) is not
    applied; values are returned as stored.
    """
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: unsupported NIfTI form, magic {magic!r} (need single-file 'n+1')")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported datatype {datatype}")
    if dim[0] != 3:
        raise VolumeFormatError(f"{path}: expected a 3D image, dim[0] = {dim[0]}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: non-positive dims {dim[1:4]}")
    dt = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(endian)
    nbytes = nx * ny * nz * dt.itemsize
    if vox_offset < NIFTI_HEADER_SIZE or len(raw) < vox_offset + nbytes:
        raise VolumeFormatError(f"{path}: voxel data truncated or vox_offset invalid")
    data = np.frombuffer(raw, dtype=dt, count=nx * ny * nz, offset=vox_offset).reshape(nz, ny, nx)
    spacing = Spacing(abs(pixdim[3]), abs(pixdim[2]), abs(pixdim[1]))
    return Volume(data.astype(dt.newbyteorder("=")), spacing, kind)


def nifti_header_bytes(dims_xyz, datatype: int, pixdim_xyz, vox_offset: int = 352,
                       magic: bytes = b"n+1\x00") -> bytes:
    """Minimal little-endian NIfTI-1 header plus the 4-byte extension flag.

    Used for fixtures and interop tests; this package does not write NIfTI
    images otherwise.
    """
    bitpix = {2: 8, 4: 16, 16: 32, 64: 64}.get(datatype, 0)
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *dims_xyz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim_xyz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<f", hdr, 112, 1.0)
    hdr[344:348] = magic
    return bytes(hdr) + b"\x00" * (vox_offset - NIFTI_HEADER_SIZE)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

REPORT_FIELDS = ("case_id",) + METRIC_FIELDS + ("theta_mm", "threshold", "w1", "w2", "meta")
_NUMERIC_FIELDS = METRIC_FIELDS + ("theta_mm", "threshold", "w1", "w2")
UNDEFINED = "undefined"


def _fmt(name: str, value) -> str:
    if value is None:
        return UNDEFINED
    return f"{value:.2f}" if name in PERCENT_FIELDS else f"{value:.4f}"


def mean_report(reports: list[CaseReport]) -> dict:
    """Column means of the displayed (rounded) values; an undefined entry makes its column undefined.

    Averaging what the table shows keeps the mean row reproducible from a
    written report, whether the rows are fresh or read back from disk.
    """
    row = {"case_id": "mean"}
    for name in _NUMERIC_FIELDS:
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            row[name] = None
        else:
            row[name] = math.fsum(float(_fmt(name, v)) for v in vals) / len(vals)
    metas = [r.meta for r in reports]
    row["meta"] = metas[0] if all(m == metas[0] for m in metas) else {}
    return row


def _rows(reports: list[CaseReport]) -> list[dict]:
    if not reports:
        raise ValueError("report list is empty")
    rows = [r.to_dict() for r in sorted(reports, key=lambda r: r.case_id)]
    rows.append(mean_report(reports))
    return rows


def _json_row(row: dict) -> str:
    parts = [f'"case_id": {json.dumps(row["case_id"])}']
    for name in _NUMERIC_FIELDS:
        v = row[name]
        parts.append(f'"{name}": {"null" if v is None else _fmt(name, v)}')
    parts.append(f'"meta": {json.dumps(row["meta"], sort_keys=True)}')
    return "  {" + ", ".join(parts) + "}"


def format_report_json(reports: list[CaseReport]) -> str:
    return "[\n" + ",\n".join(_json_row(r) for r in _rows(reports)) + "\n]\n"


def _meta_cell(meta: dict) -> str:
    return ";".join(f"{k}={meta[k]}" for k in sorted(meta))


def format_report_csv(reports: list[CaseReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for row in _rows(reports):
        w.writerow([row["case_id"]] + [_fmt(n, row[n]) for n in _NUMERIC_FIELDS] + [_meta_cell(row["meta"])])
    return buf.getvalue()


def write_report(reports: list[CaseReport], path, format: str = "json"):
    if format == "json":
        text = format_report_json(reports)
    elif format == "csv":
        text = format_report_csv(reports)
    else:
        raise ValueError(f"format must be json or csv, got {format!r}")
    Path(path).write_text(text)


def format_case_json(report: CaseReport) -> str:
    """A single case as a JSON object, same number formatting as the table."""
    row = report.to_dict()
    return _json_row(row).strip() + "\n"


def report_from_dict(d: dict) -> CaseReport:
    missing = [k for k in REPORT_FIELDS if k not in d and k != "meta"]
    if missing:
        raise ValueError(f"case report missing fields {missing}")
    kw = {k: d[k] for k in REPORT_FIELDS if k in d}
    kw["case_id"] = str(kw["case_id"])
    for name in _NUMERIC_FIELDS:
        v = kw[name]
        kw[name] = None if v is None else float(v)
    kw.setdefault("meta", {})
    return CaseReport(**kw)


def read_reports(path) -> list[CaseReport]:
    """Load a single-case JSON object or a JSON table (the mean row is dropped)."""
    data = json.loads(Path(path).read_text())
    items = data if isinstance(data, list) else [data]
    return [report_from_dict(d) for d in items if d.get("case_id") != "mean"]
