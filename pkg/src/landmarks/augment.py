"""Random-convolution contrast augmentation and random affine augmentation."""
from __future__ import annotations

import logging
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .errors import NumericalError
from .types import AffineAug, AffineRanges, LandmarkSet, RcConfig, Volume3D
from .volume import rescale_unit, sample_trilinear

logger = logging.getLogger(__name__)


# RANDOM CONVOLUTION

def rc_kernels(cfg: RcConfig, seed: int) -> List[np.ndarray]:
    """Sampled (C_out, C_in, k, k, k) kernels of the cascade 1 -> C -> ... -> C -> 1"""
    rng = np.random.default_rng(seed)
    widths = [1] + [cfg.channels] * (cfg.layers - 1) + [1]
    k = cfg.kernel_size
    kernels = []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        w = rng.uniform(cfg.weight_low, cfg.weight_high, size=(c_out, c_in, k, k, k))
        # a single weight would centre to zero
        if w.size > 1:
            w = w - w.mean()
        kernels.append(w)
    return kernels


def _pointwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # elementwise accumulation keeps equal voxels bitwise equal
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for o in range(w.shape[0]):
        for i in range(w.shape[1]):
            out[o] += w[o, i, 0, 0, 0] * x[i]
    return out


def rc_augment(v: Volume3D, cfg: RcConfig, seed: int) -> Volume3D:
    """Cascade of random convolutions with leaky-relu, rescaled to [0, 1]"""
    x = v.data[None]
    for w in rc_kernels(cfg, seed):
        if cfg.kernel_size == 1:
            x = _pointwise(x, w)
        else:
            x = ad.conv3d(ad.Tensor(x), w, padding=cfg.kernel_size // 2).values
        x = np.where(x > 0, x, cfg.slope * x)
    return v.with_data(rescale_unit(x[0]))


# AFFINE

def _rotation(deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _shear(s) -> np.ndarray:
    return np.array([[1.0, s[0], s[1]], [0.0, 1.0, s[2]], [0.0, 0.0, 1.0]])


def affine_matrix(aug: AffineAug) -> np.ndarray:
    """4x4 world map x -> L (x - c) + c + t, with L = scale . shear . rotation"""
    linear = np.diag(aug.scale) @ _shear(aug.shear) @ _rotation(aug.rotation_deg)
    center = np.asarray(aug.center)
    m = np.eye(4)
    m[:3, :3] = linear
    m[:3, 3] = center - linear @ center + np.asarray(aug.translation_vox) * np.asarray(aug.spacing)
    return m


def affine_matrices(aug: AffineAug) -> Tuple[np.ndarray, np.ndarray]:
    m = affine_matrix(aug)
    if abs(np.linalg.det(m)) < 1e-12 or np.linalg.cond(m) > 1e12:
        raise NumericalError(f"affine augmentation is not invertible: {aug}")
    return m, np.linalg.inv(m)


def sample_affine(ranges: AffineRanges, seed: int, v: Volume3D) -> Tuple[AffineAug, np.ndarray, np.ndarray]:
    """Uniformly sampled augmentation about the center of ``v``, with its forward and inverse matrices"""
    rng = np.random.default_rng(seed)
    rotation = rng.uniform(*ranges.rotation_deg, size=3) * np.asarray(ranges.rotation_axes, dtype=np.float64)
    aug = AffineAug(
        rotation_deg=tuple(rotation),
        translation_vox=tuple(rng.uniform(*ranges.translation_vox, size=3)),
        scale=tuple(rng.uniform(*ranges.scale, size=3)),
        shear=tuple(rng.uniform(*ranges.shear, size=3)),
        center=tuple(v.center()),
        spacing=v.spacing,
    )
    m, inv = affine_matrices(aug)
    return aug, m, inv


def _transform(points: np.ndarray, m: np.ndarray) -> np.ndarray:
    return points @ m[:3, :3].T + m[:3, 3]


def apply_affine(v: Volume3D, aug: AffineAug) -> Volume3D:
    """Backward-warp ``v`` with the inverse matrix so content moves by the forward map"""
    _, inv = affine_matrices(aug)
    src = _transform(v.world_grid().reshape(-1, 3), inv)
    return v.with_data(sample_trilinear(v, src).reshape(v.shape))


def apply_affine_points(lm: LandmarkSet, aug: AffineAug, inverse: bool = False) -> LandmarkSet:
    m, inv = affine_matrices(aug)
    return LandmarkSet(points=_transform(lm.points, inv if inverse else m))
