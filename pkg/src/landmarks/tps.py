"""Regularised thin-plate splines, differentiable through the fit.

The fit solves the saddle-point system

    [[M + lam I, R], [R^T, 0]] [V; W] = [Y; 0]

with M_ij = Phi(|x_i - x_j|^2) over the control points in mm and R = [x, 1].
Evaluation is T(p) = W^T [p, 1] + sum_j v_j Phi(|x_j - p|^2), so a serialized
``{W, V, source_points, lambda}`` can be applied without this module.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .types import LandmarkSet, TpsTransform, Volume3D

logger = logging.getLogger(__name__)

PointsLike = Union[LandmarkSet, Tensor, np.ndarray]

DEFAULT_KERNEL = "squared_distance"


def kernel_phi(r):
    """Phi(r) = r^2 ln r, with the limit value 0 at r = 0"""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise DataError("kernel_phi is undefined for negative arguments")
    safe = np.where(r > 0, r, 1.0)
    out = np.where(r > 0, r * r * np.log(safe), 0.0)
    return float(out) if out.ndim == 0 else out


def _as_points(x: PointsLike) -> Tensor:
    if isinstance(x, LandmarkSet):
        return Tensor(x.points)
    pts = ad.as_tensor(x)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def kernel_matrix(a: PointsLike, b: PointsLike, kernel: str = DEFAULT_KERNEL) -> Tensor:
    """Phi over pairwise distances between rows of ``a`` and ``b``"""
    return ad.tps_kernel(ad.sqdist(_as_points(a), _as_points(b)), kernel)


def _affine_basis(x: Tensor) -> Tensor:
    return ad.concat([x, np.ones((x.shape[0], 1))], axis=1)


def fit_tps(source: PointsLike, target: PointsLike, lam: float, kernel: str = DEFAULT_KERNEL) -> TpsTransform:
    """Fit the TPS mapping ``source`` onto ``target``; exact interpolation at lam = 0"""
    src, dst = _as_points(source), _as_points(target)
    n = src.shape[0]
    if dst.shape[0] != n:
        raise DataError(f"count mismatch: {n} source vs {dst.shape[0]} target points")
    if n <= 3:
        raise DataError(f"a 3D thin-plate spline needs more than 3 control points, got {n}")
    if lam < 0:
        raise DataError(f"lambda must be nonnegative, got {lam}")

    m = kernel_matrix(src, src, kernel)
    if lam:
        m = m + lam * np.eye(n)
    r = _affine_basis(src)
    system = ad.concat(
        [ad.concat([m, r], axis=1), ad.concat([r.T, np.zeros((4, 4))], axis=1)],
        axis=0,
    )
    rhs = ad.concat([dst, np.zeros((4, 3))], axis=0)
    solution = ad.solve(system, rhs)
    return TpsTransform(W=solution[n:], V=solution[:n], source_points=src, lam=float(lam), kernel=kernel)


def eval_tps_tensor(t: TpsTransform, points: PointsLike) -> Tensor:
    """In-graph evaluation at (P, 3) points"""
    pts = _as_points(points)
    return kernel_matrix(pts, t.source_points, t.kernel) @ t.V + _affine_basis(pts) @ t.W


def eval_tps(t: TpsTransform, p) -> np.ndarray:
    """T(p) for a single 3-vector or a (P, 3) array"""
    arr = np.asarray(p, dtype=np.float64)
    out = eval_tps_tensor(t, Tensor(arr.reshape(-1, 3))).values
    return out[0] if arr.ndim == 1 else out


def dense_field_tensor(t: TpsTransform, grid: Volume3D) -> Tensor:
    """T at every voxel of ``grid`` as a (H*W*D, 3) tensor, voxels in C order"""
    return eval_tps_tensor(t, Tensor(grid.world_grid().reshape(-1, 3)))


def dense_field(t: TpsTransform, grid: Volume3D) -> np.ndarray:
    return dense_field_tensor(t, grid).values.reshape(grid.shape + (3,))


def warp_volume(v: Volume3D, t: TpsTransform, like: Volume3D = None) -> Volume3D:
    """Pull ``v`` back through ``t``: output(u) = v(T(u)) on the grid of ``like``"""
    out_geom = like or v
    values = ad.sample_trilinear(v.data, dense_field_tensor(t, out_geom), v.origin, v.spacing).values
    return out_geom.with_data(values.reshape(out_geom.shape))


def bending_energy(t: TpsTransform) -> float:
    """trace(V^T M V) over the fitted control points, floored at 0"""
    m = kernel_matrix(t.source_points, t.source_points, t.kernel).values
    v = t.V.values
    # with only affine side conditions the squared-distance form is not sign-definite
    return max(float(np.trace(v.T @ m @ v)), 0.0)


def constraint_residuals(t: TpsTransform) -> Tuple[float, float]:
    """(|sum v_j|, |sum v_j x_j^T|) relative to |V|"""
    v = t.V.values
    x = t.source_points.values
    denom = max(float(np.linalg.norm(v)), 1.0)
    return (
        float(np.linalg.norm(v.sum(axis=0))) / denom,
        float(np.linalg.norm(x.T @ v)) / denom,
    )


def fit_affine(source: PointsLike, target: PointsLike) -> np.ndarray:
    """Closed-form least-squares affine map, (4, 3) acting on [x, 1] in mm"""
    src, dst = _as_points(source).values, _as_points(target).values
    basis = np.hstack([src, np.ones((src.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(basis, dst, rcond=None)
    return coef


def identity_transform(points: PointsLike) -> TpsTransform:
    return fit_tps(points, points, 0.0)


# SERIALIZATION

def transform_to_dict(t: TpsTransform) -> Dict:
    return {
        "W": t.W.values.tolist(),
        "V": t.V.values.tolist(),
        "source_points": t.source_points.values.tolist(),
        "lambda": t.lam,
        "kernel": t.kernel,
    }


def transform_from_dict(d: Dict) -> TpsTransform:
    try:
        return TpsTransform(
            W=Tensor(np.asarray(d["W"]).reshape(4, 3)),
            V=Tensor(np.asarray(d["V"]).reshape(-1, 3)),
            source_points=Tensor(np.asarray(d["source_points"]).reshape(-1, 3)),
            lam=float(d["lambda"]),
            kernel=d.get("kernel", DEFAULT_KERNEL),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"malformed transform: {e}") from e


def save_transform(t: TpsTransform, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(transform_to_dict(t), indent=2))


def load_transform(path: Union[str, Path]) -> TpsTransform:
    try:
        return transform_from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read transform {path}: {e}") from e
