"""Point clouds and the on-disk formats used by the CLI.

Formats
-------
``bin_xyzi``
    Packed little-endian float32 records ``(x, y, z, intensity)``, 16 bytes
    per point.  This is the layout used by most automotive datasets.
``ply_ascii``
    ASCII PLY with float ``x y z`` vertex properties (``intensity`` optional).

Tables are written as CSV with a header row, ``\\n`` line endings and floats
printed with 9 significant digits.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ScanFormat = Literal["bin_xyzi", "ply_ascii"]

_RECORD = np.dtype("<f4")


class ScanFormatError(ValueError):
    """Raised when a scan file does not match its declared format."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) float64 points in meters with optional per-point intensity."""

    points: np.ndarray
    intensity: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.ascontiguousarray(np.asarray(self.intensity, dtype=np.float64).reshape(-1))
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length does not match point count")
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.intensity)

    def subset(self, index: np.ndarray) -> PointCloud:
        inten = None if self.intensity is None else self.intensity[index]
        return PointCloud(self.points[index], inten)

    @staticmethod
    def concatenate(clouds: Sequence[PointCloud]) -> PointCloud:
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.intensity is not None for c in clouds):
            inten = np.concatenate([c.intensity for c in clouds])
        else:
            inten = None
        return PointCloud(pts, inten)


def _drop_nonfinite(points: np.ndarray, intensity: np.ndarray | None) -> tuple[PointCloud, int]:
    ok = np.isfinite(points).all(axis=1)
    dropped = int(points.shape[0] - np.count_nonzero(ok))
    if dropped:
        logger.info("dropped %d non-finite points", dropped)
    inten = None if intensity is None else intensity[ok]
    return PointCloud(points[ok], inten), dropped


def load_scan(path: str | os.PathLike, format: ScanFormat = "bin_xyzi") -> tuple[PointCloud, int]:
    """Read a scan; returns the cloud and the number of non-finite points dropped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scan file not found: {path}")
    if format == "bin_xyzi":
        raw = path.read_bytes()
        if len(raw) % (4 * _RECORD.itemsize) != 0:
            raise ScanFormatError(
                f"{path}: truncated record ({len(raw)} bytes is not a multiple of 16)"
            )
        data = np.frombuffer(raw, dtype=_RECORD).reshape(-1, 4).astype(np.float64)
        return _drop_nonfinite(data[:, :3], data[:, 3])
    if format == "ply_ascii":
        return _drop_nonfinite(*_read_ply(path))
    raise ValueError(f"unknown scan format {format!r}")


def _read_ply(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        try:
            lines = fh.read().splitlines()
        except UnicodeDecodeError as exc:
            raise ScanFormatError(f"{path}: not an ASCII PLY file") from exc
    if not lines or lines[0].strip() != "ply":
        raise ScanFormatError(f"{path}: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    fmt_ok = False
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ScanFormatError(f"{path}: only ASCII PLY is supported")
            fmt_ok = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ScanFormatError(f"{path}: malformed element line {line!r}")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError as exc:
                    raise ScanFormatError(f"{path}: bad vertex count {tok[2]!r}") from exc
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3:
                    raise ScanFormatError(f"{path}: unsupported vertex property {line!r}")
                props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
        else:
            raise ScanFormatError(f"{path}: unexpected header line {line!r}")
    if body_start is None or not fmt_ok or n_vertex is None:
        raise ScanFormatError(f"{path}: malformed PLY header")
    if not {"x", "y", "z"} <= set(props):
        raise ScanFormatError(f"{path}: vertex element lacks x/y/z properties")
    body = [ln for ln in lines[body_start:body_start + n_vertex]]
    if len(body) < n_vertex:
        raise ScanFormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    if n_vertex == 0:
        return np.empty((0, 3)), None
    try:
        table = np.loadtxt(io.StringIO("\n".join(body)), dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ScanFormatError(f"{path}: unparseable vertex data") from exc
    if table.shape[1] != len(props):
        raise ScanFormatError(f"{path}: vertex rows do not match declared properties")
    cols = {name: table[:, k] for k, name in enumerate(props)}
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]])
    return pts, cols.get("intensity")


def save_scan(cloud: PointCloud, path: str | os.PathLike, format: ScanFormat = "bin_xyzi") -> None:
    """Write ``cloud``; deterministic byte output for identical input."""
    path = Path(path)
    n = len(cloud)
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(n)
    if format == "bin_xyzi":
        rec = np.empty((n, 4), dtype=_RECORD)
        rec[:, :3] = cloud.points
        rec[:, 3] = inten
        path.write_bytes(rec.tobytes())
        return
    if format == "ply_ascii":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {n}",
            "property float x",
            "property float y",
            "property float z",
        ]
        cols = [cloud.points]
        if cloud.intensity is not None:
            header.append("property float intensity")
            cols.append(cloud.intensity[:, None])
        header.append("end_header")
        buf = io.StringIO()
        buf.write("\n".join(header) + "\n")
        if n:
            np.savetxt(buf, np.hstack(cols), fmt="%.9g")
        path.write_text(buf.getvalue(), encoding="ascii")
        return
    raise ValueError(f"unknown scan format {format!r}")


def format_value(value: Any) -> str:
    """CSV cell text: 9 significant digits for floats, empty for None/NaN."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return f"{float(value) + 0.0:.9g}"  # no "-0"
    return str(value)


def write_table(
    rows: Iterable[Mapping[str, Any]],
    path: str | os.PathLike,
    header: Sequence[str] | None = None,
) -> None:
    """Write records as CSV; the header comes from ``header`` or the first row."""
    rows = list(rows)
    if header is None:
        if not rows:
            raise ValueError("an empty table needs an explicit header")
        header = list(rows[0].keys())
    header = list(header)
    for row in rows:
        if list(row.keys()) != header:
            raise ValueError(f"inconsistent field names: {list(row.keys())} != {header}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(row[k]) for k in header])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
