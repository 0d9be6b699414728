import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from app.models.calibration import CenterPair
from app.models.lidar import PointCloud
from app.utilities.exceptions import IoFailure, SchemaMismatch

FLOAT_FORMAT = "%.9f"
MASK_THRESHOLD = 128


def _existing(path: str | Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"{path} does not exist or is not a file")
    return path


def ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create directory {path}: {e}")
    if not path.is_dir():
        raise IoFailure(f"{path} is not a directory")
    return path


def write_ply(path: str | Path, cloud: PointCloud) -> Path:
    """
    Writes an ASCII PLY with x, y, z and, when present, label and frame.

    Floats use a fixed format so equal clouds give equal bytes.
    """
    path = Path(path)
    columns = [cloud.points]
    formats = [FLOAT_FORMAT] * 3
    properties = ["property float x", "property float y", "property float z"]
    for name in ("label", "frame"):
        column = getattr(cloud, name)
        if column is not None:
            columns.append(column[:, None])
            formats.append("%d")
            properties.append(f"property int {name}")
    header = "\n".join(["ply", "format ascii 1.0", f"element vertex {len(cloud)}", *properties, "end_header"])
    try:
        np.savetxt(path, np.hstack(columns) if len(cloud) else np.empty((0, len(formats))),
                   fmt=formats, header=header, comments="")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")
    return path


def read_ply(path: str | Path) -> PointCloud:
    """
    Reads an ASCII PLY point cloud.

    Raises:
        IoFailure: If the file cannot be read.
        SchemaMismatch: If it is not an ASCII PLY with x, y, z vertices.
    """
    path = _existing(path)
    try:
        with open(path, "r") as f:
            if f.readline().strip() != "ply":
                raise SchemaMismatch(f"{path} is not a PLY file")
            names, count, header_lines = [], None, 1
            for line in f:
                header_lines += 1
                tokens = line.split()
                if not tokens:
                    continue
                if tokens[0] == "format" and tokens[1] != "ascii":
                    raise SchemaMismatch(f"{path}: only ASCII PLY is supported")
                if tokens[:2] == ["element", "vertex"]:
                    count = int(tokens[2])
                elif tokens[0] == "property" and count is not None:
                    names.append(tokens[-1])
                elif tokens[0] == "end_header":
                    break
    except (OSError, UnicodeDecodeError, ValueError, IndexError) as e:
        raise IoFailure(f"cannot read {path}: {e}")
    if count is None or not {"x", "y", "z"} <= set(names):
        raise SchemaMismatch(f"{path} has no x, y, z vertex properties")
    if count == 0:
        return PointCloud(points=np.empty((0, 3)))
    try:
        table = pd.read_csv(path, sep=r"\s+", header=None, names=names, skiprows=header_lines, nrows=count)
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise SchemaMismatch(f"{path}: malformed vertex data ({e})")
    if len(table) != count:
        raise SchemaMismatch(f"{path}: expected {count} vertices, found {len(table)}")
    return PointCloud(
        points=table[["x", "y", "z"]].to_numpy(dtype=np.float64),
        label=table["label"].to_numpy() if "label" in table else None,
        frame=table["frame"].to_numpy() if "frame" in table else None,
    )


def read_csv_cloud(path: str | Path) -> PointCloud:
    """Reads a CSV cloud with columns x, y, z and an optional frame."""
    path = _existing(path)
    try:
        table = pd.read_csv(path)
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise SchemaMismatch(f"{path}: malformed CSV ({e})")
    if not {"x", "y", "z"} <= set(table.columns):
        raise SchemaMismatch(f"{path} lacks x, y, z columns")
    return PointCloud(
        points=table[["x", "y", "z"]].to_numpy(dtype=np.float64),
        frame=table["frame"].to_numpy() if "frame" in table else None,
    )


def read_cloud(path: str | Path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".csv":
        return read_csv_cloud(path)
    raise SchemaMismatch(f"unsupported point cloud format {suffix}")


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    """Writes a binary mask as an 8-bit PGM (P5) or PNG, foreground 255."""
    path = Path(path)
    image = Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))
    try:
        image.save(path, format="PPM" if path.suffix.lower() == ".pgm" else None)
    except (OSError, ValueError, KeyError) as e:
        raise IoFailure(f"cannot write {path}: {e}")
    return path


def read_gray(path: str | Path) -> np.ndarray:
    """Reads a single-channel 8-bit image."""
    path = _existing(path)
    try:
        with Image.open(path) as image:
            if image.mode not in ("L", "1", "P"):
                raise SchemaMismatch(f"{path} is not a single-channel image ({image.mode})")
            return np.asarray(image.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise IoFailure(f"cannot read {path}: {e}")


def read_mask(path: str | Path) -> np.ndarray:
    """Reads a mask; pixels at or above 128 are foreground."""
    return read_gray(path) >= MASK_THRESHOLD


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    except (OSError, TypeError) as e:
        raise IoFailure(f"cannot write {path}: {e}")
    return path


def read_json(path: str | Path) -> Any:
    path = _existing(path)
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"{path} is not valid JSON: {e}")


def read_pairs(path: str | Path) -> list[CenterPair]:
    """
    Reads center pairs from a JSON array of {scene_id, lidar: [x, y, z], cam: [u, v]}.

    Raises:
        SchemaMismatch: If an entry does not match the layout.
    """
    payload = read_json(path)
    if not isinstance(payload, list):
        raise SchemaMismatch(f"{path} must hold a JSON array of pairs")
    try:
        return [CenterPair(scene_id=str(item["scene_id"]), p_lidar=item["lidar"], p_cam=item["cam"])
                for item in payload]
    except (KeyError, TypeError, ValidationError) as e:
        raise SchemaMismatch(f"{path}: malformed pair ({e})")


def write_pairs(path: str | Path, pairs: Sequence[CenterPair]) -> Path:
    return write_json(path, [
        {"scene_id": p.scene_id, "lidar": list(p.p_lidar), "cam": list(p.p_cam)} for p in pairs
    ])


def write_table(path: str | Path, table: pd.DataFrame) -> Path:
    path = Path(path)
    try:
        table.to_csv(path, index=False, float_format="%.6f")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")
    return path
