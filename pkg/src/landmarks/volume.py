"""Volume and landmark file IO, trilinear sampling and field resampling.

On disk a volume is ``<name>.f32raw`` (little-endian float32, x fastest) plus
``<name>.json`` holding ``shape``, ``spacing`` and ``origin``. Landmarks are a
JSON array of ``[x, y, z]`` triples in mm.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import ValidationError

from ..config.settings import SIDECAR_SUFFIX, VOLUME_SUFFIX
from .autodiff import interpolate_trilinear
from .errors import DataError, ShapeError
from .types import LandmarkSet, Volume3D

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def volume_paths(path: PathLike):
    """(raw file, sidecar) for a path given with or without a suffix"""
    p = Path(path)
    if p.suffix in (VOLUME_SUFFIX, SIDECAR_SUFFIX):
        p = p.with_suffix("")
    return p.with_name(p.name + VOLUME_SUFFIX), p.with_name(p.name + SIDECAR_SUFFIX)


def load_volume(path: PathLike) -> Volume3D:
    raw_path, sidecar_path = volume_paths(path)
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar {sidecar_path}")
    if not raw_path.exists():
        raise DataError(f"missing voxel file {raw_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
        origin = tuple(float(s) for s in meta.get("origin", (0.0, 0.0, 0.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed sidecar {sidecar_path}: {e}") from e
    if len(shape) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise DataError(f"sidecar {sidecar_path} must give 3-component shape, spacing and origin")

    data = np.fromfile(raw_path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DataError(f"size mismatch: {raw_path} holds {data.size} floats, sidecar shape {shape} needs {expected}")
    try:
        return Volume3D(data=data.reshape(shape, order="F"), spacing=spacing, origin=origin)
    except ValidationError as e:
        raise DataError(f"invalid volume {raw_path}: {e.errors()[0]['msg']}") from e


def save_volume(v: Volume3D, path: PathLike) -> None:
    """Write voxels as float32; values that are not float32-exact are rounded"""
    raw_path, sidecar_path = volume_paths(path)
    try:
        raw_path.parent.mkdir(parents=True, exist_ok=True)
        np.asarray(v.data, dtype="<f4").ravel(order="F").tofile(raw_path)
        sidecar_path.write_text(
            json.dumps({"shape": list(v.shape), "spacing": list(v.spacing), "origin": list(v.origin)})
        )
    except OSError as e:
        raise DataError(f"cannot write volume to {raw_path}: {e}") from e


def load_landmarks(path: PathLike) -> LandmarkSet:
    try:
        points = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing landmark file {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed landmark file {path}: {e}") from e
    try:
        return LandmarkSet(points=points)
    except ValidationError as e:
        raise DataError(f"invalid landmarks in {path}: {e.errors()[0]['msg']}") from e


def save_landmarks(lm: LandmarkSet, path: PathLike) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(lm.to_list()))
    except OSError as e:
        raise DataError(f"cannot write landmarks to {path}: {e}") from e


def sample_trilinear(v: Volume3D, p) -> Union[float, np.ndarray]:
    """Trilinear value at world point(s) p; zero outside the grid"""
    pts = np.asarray(p, dtype=np.float64)
    values, _ = interpolate_trilinear(v.data, v.world_to_index(pts.reshape(-1, 3)))
    return float(values[0]) if pts.ndim == 1 else values.reshape(pts.shape[:-1])


def resample_by_field(v: Volume3D, field: np.ndarray, like: Optional[Volume3D] = None) -> Volume3D:
    """Backward warp: output(u) = v sampled at field(u), with field mapping output voxels to source mm"""
    out_geom = like or v
    field = np.asarray(field, dtype=np.float64)
    if field.shape != out_geom.shape + (3,):
        raise ShapeError(f"field shape {field.shape} does not match output grid {out_geom.shape + (3,)}")
    values = sample_trilinear(v, field.reshape(-1, 3))
    return out_geom.with_data(values.reshape(out_geom.shape))


def identity_field(v: Volume3D) -> np.ndarray:
    return v.world_grid()


def rescale_unit(data: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant input maps to zeros"""
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0:
        return np.zeros_like(data, dtype=np.float64)
    return np.clip((data - lo) / (hi - lo), 0.0, 1.0)
