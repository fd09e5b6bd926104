"""Plain-text point files, scene manifests and deterministic JSON/CSV output.

Point files hold one point per line as whitespace-separated decimals; ``#``
starts a comment.  3-d files have three coordinate columns and an optional
integer label column, 2-d files two columns.  Values are written with 17
significant digits so that a write/read cycle is exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .liegeo import CameraIntrinsics, Pose, log_map

FLOAT_FORMAT = "%.17g"


class PointFileError(ConfigurationError):
    """Malformed point file; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def write_points(path, points: np.ndarray, labels: np.ndarray | None = None, header: str = "") -> None:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ConfigurationError("points must be (N, 2) or (N, 3)")
    if labels is not None and pts.shape[1] != 3:
        raise ConfigurationError("labels are only stored with 3-d points")
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    for i, row in enumerate(pts):
        fields = [FLOAT_FORMAT % v for v in row]
        if labels is not None:
            fields.append(str(int(labels[i])))
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_points(path, dim: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Parse a ``dim``-column point file.  Returns ``(points, labels)``;
    ``labels`` is None unless every row of a 3-d file has a label column."""
    if dim not in (2, 3):
        raise ConfigurationError("dim must be 2 or 3")
    rows, labels = [], []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        allowed = (3, 4) if dim == 3 else (2,)
        if len(parts) not in allowed:
            raise PointFileError(path, lineno, f"expected {dim} columns, found {len(parts)}")
        try:
            vals = [float(v) for v in parts[:dim]]
        except ValueError:
            raise PointFileError(path, lineno, "non-numeric coordinate") from None
        if not all(math.isfinite(v) for v in vals):
            raise PointFileError(path, lineno, "non-finite coordinate")
        rows.append(vals)
        if len(parts) == 4:
            try:
                labels.append(int(parts[3]))
            except ValueError:
                raise PointFileError(path, lineno, "label must be an integer") from None
    if not rows:
        raise ConfigurationError(f"{path}: no points")
    if labels and len(labels) != len(rows):
        raise ConfigurationError(f"{path}: label column present on some rows only")
    return np.array(rows, dtype=float), (np.array(labels, dtype=np.int64) if labels else None)


def pose_to_dict(pose: Pose) -> dict:
    return {"matrix": pose.matrix().tolist(), "twist": log_map(pose).tolist()}


def pose_from_dict(d: dict) -> Pose:
    m = np.asarray(d["matrix"], dtype=float)
    if m.shape != (4, 4):
        raise ConfigurationError("pose matrix must be 4x4")
    return Pose.from_matrix(m)


def camera_to_dict(c: CameraIntrinsics) -> dict:
    return asdict(c)


def camera_from_dict(d: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(**{k: float(d[k]) for k in ("fx", "fy", "cx", "cy", "width", "height")})
    except KeyError as exc:
        raise ConfigurationError(f"camera is missing {exc.args[0]!r}") from None


def to_jsonable(obj):
    """Plain JSON types; NaN/inf become None so output stays valid JSON."""
    if isinstance(obj, Pose):
        return pose_to_dict(obj)
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(path, obj) -> None:
    text = json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def write_csv(path, header: list[str], rows: list[list], comment: dict | None = None) -> None:
    """CSV with an optional leading ``# key=value`` block for the run header."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write("# " + json.dumps(to_jsonable(comment), sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, Enum):
        return v.value
    return v


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]
