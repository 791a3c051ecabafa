"""Point-cloud file formats: ascii PLY, XYZN text, and gt.txt transforms.

Numbers in cloud files are written with 9 significant digits, which is
enough for the 1e-6 acceptance tolerances and makes save/load/save
round-trips byte-identical. Ground-truth transforms use 17 significant
digits so they survive a reload at 1e-12.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .geometry import RigidTransform

FLOAT_FMT = "%.9g"
EXACT_FMT = "%.17g"


class ParseError(ValueError):
    """Malformed cloud file; carries the 1-based offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _format_row(values) -> str:
    return " ".join(FLOAT_FMT % v for v in values)


def save(path, cloud: PointCloud) -> None:
    """Write a cloud as PLY or XYZN, chosen by the file extension."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        _save_ply(path, cloud)
    else:
        _save_xyzn(path, cloud)


def load(path) -> PointCloud:
    """Read a PLY or XYZN cloud, chosen by the file extension."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    return _load_xyzn(path)


def _save_ply(path: Path, cloud: PointCloud) -> None:
    n = len(cloud)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if cloud.has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    if cloud.has_normals:
        data = np.hstack([cloud.positions, cloud.normals])
    else:
        data = cloud.positions
    lines += [_format_row(row) for row in data]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_ply(path: Path) -> PointCloud:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex: int | None = None
    properties: list[str] = []
    body_start = None
    in_vertex_element = False
    for i, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise ParseError("only 'format ascii 1.0' is supported", i)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element declaration", i)
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise ParseError("vertex count is not an integer", i) from None
            elif int(tokens[2]) != 0:
                raise ParseError(f"unsupported non-empty element '{tokens[1]}'", i)
        elif tokens[0] == "property":
            if in_vertex_element:
                if len(tokens) != 3 or tokens[1] not in ("float", "double", "float32", "float64"):
                    raise ParseError("unsupported vertex property", i)
                properties.append(tokens[2])
        elif tokens[0] == "end_header":
            body_start = i
            break
        else:
            raise ParseError(f"unexpected header token '{tokens[0]}'", i)
    if body_start is None:
        raise ParseError("missing end_header", len(lines))
    if n_vertex is None:
        raise ParseError("missing 'element vertex' declaration", body_start)
    has_pos = properties[:3] == ["x", "y", "z"]
    if not has_pos:
        raise ParseError("vertex properties must start with x y z", body_start)
    has_normals = properties[3:6] == ["nx", "ny", "nz"]
    width = len(properties)

    body = lines[body_start:]
    rows = []
    count = 0
    for offset, raw in enumerate(body, start=body_start + 1):
        if not raw.strip():
            continue
        values = raw.split()
        if len(values) != width:
            raise ParseError(f"expected {width} values, found {len(values)}", offset)
        try:
            rows.append([float(v) for v in values])
        except ValueError:
            raise ParseError("non-numeric value", offset) from None
        count += 1
    if count != n_vertex:
        raise ParseError(
            f"header declares {n_vertex} vertices but body has {count}",
            body_start + 1 + len(body),
        )
    data = np.asarray(rows, dtype=np.float64).reshape(count, width)
    normals = data[:, 3:6] if has_normals else None
    return PointCloud(data[:, :3], normals)


def _save_xyzn(path: Path, cloud: PointCloud) -> None:
    normals = cloud.require_normals()
    data = np.hstack([cloud.positions, normals])
    text = "\n".join(_format_row(row) for row in data)
    path.write_text(text + "\n", encoding="utf-8")


def _load_xyzn(path: Path) -> PointCloud:
    rows = []
    for i, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        values = raw.split()
        if len(values) != 6:
            raise ParseError(f"expected 6 values per line, found {len(values)}", i)
        try:
            rows.append([float(v) for v in values])
        except ValueError:
            raise ParseError("non-numeric value", i) from None
    if not rows:
        raise ParseError("empty cloud file", 1)
    data = np.asarray(rows, dtype=np.float64)
    return PointCloud(data[:, :3], data[:, 3:6])


def save_transform(path, t: RigidTransform) -> None:
    """Write a transform as 3 lines of 4 floats, row-major [R | t]."""
    rows = np.hstack([t.rotation, t.translation.reshape(3, 1)])
    text = "\n".join(" ".join(EXACT_FMT % v for v in row) for row in rows)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_transform(path) -> RigidTransform:
    rows = []
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        values = raw.split()
        if len(values) != 4:
            raise ParseError(f"expected 4 values per line, found {len(values)}", i)
        rows.append([float(v) for v in values])
    if len(rows) != 3:
        raise ParseError(f"expected 3 rows, found {len(rows)}", len(rows) + 1)
    m = np.asarray(rows, dtype=np.float64)
    return RigidTransform(m[:, :3], m[:, 3])


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
