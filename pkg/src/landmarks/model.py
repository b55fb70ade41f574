"""Landmark detector: a stack of 3D conv blocks with a center-of-mass head."""
from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .types import DetectorConfig, Volume3D

logger = logging.getLogger(__name__)


class DetectorParams:
    """Named parameter tensors of one detector, in a fixed order"""

    def __init__(self, config: DetectorConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def detached(self) -> "DetectorParams":
        """Constant copies, for inference without graph bookkeeping"""
        return DetectorParams(self.config, {k: Tensor(t.values.copy()) for k, t in self._tensors.items()})

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.config, {k: ad.parameter(t.values) for k, t in self._tensors.items()})

    def replace(self, name: str, tensor: Tensor) -> "DetectorParams":
        tensors = dict(self._tensors)
        tensors[name] = tensor
        return DetectorParams(self.config, tensors)

    def num_values(self) -> int:
        return int(sum(t.values.size for t in self._tensors.values()))


def param_shapes(cfg: DetectorConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    c_in, k = 1, cfg.kernel_size
    for i, block in enumerate(cfg.blocks):
        shapes[f"block{i}.conv"] = (block.channels, c_in, k, k, k)
        shapes[f"block{i}.norm_scale"] = (block.channels,)
        shapes[f"block{i}.norm_shift"] = (block.channels,)
        c_in = block.channels
    shapes["head.conv"] = (cfg.landmarks, c_in, 1, 1, 1)
    return shapes


def init_params(cfg: DetectorConfig, seed: int) -> DetectorParams:
    """Fan-in scaled normal kernels; norm scale 1 and shift 0"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".conv"):
            fan_in = int(np.prod(shape[1:]))
            values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".norm_scale"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        tensors[name] = ad.parameter(values)
    return DetectorParams(cfg, tensors)


def _input_tensor(cfg: DetectorConfig, x: Union[Volume3D, np.ndarray, Tensor]) -> Tensor:
    if isinstance(x, Volume3D):
        x = x.data
    t = ad.as_tensor(x)
    if t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    if t.shape != (1,) + tuple(cfg.input_shape):
        raise ShapeError(f"detector expects input shape {tuple(cfg.input_shape)}, got {t.shape[1:]}")
    return t


def detector_forward(params: DetectorParams, x: Union[Volume3D, np.ndarray, Tensor]) -> Tensor:
    """Per-landmark feature maps (L, h, w, d) at the pooled working resolution"""
    cfg = params.config
    h = _input_tensor(cfg, x)
    pad = cfg.kernel_size // 2
    for i, block in enumerate(cfg.blocks):
        h = ad.conv3d(h, params[f"block{i}.conv"], padding=pad)
        h = ad.instance_norm(h, params[f"block{i}.norm_scale"], params[f"block{i}.norm_shift"])
        h = ad.relu(h)
        if block.pool:
            h = ad.max_pool3d(h)
    return ad.conv3d(h, params["head.conv"])


def working_grid(geometry: Volume3D, pool_count: int, shape: Tuple[int, int, int]) -> np.ndarray:
    """World coordinates (h, w, d, 3) of the voxels of a grid pooled ``pool_count`` times"""
    factor = 2 ** pool_count
    spacing = np.asarray(geometry.spacing) * factor
    origin = np.asarray(geometry.origin) + (factor - 1) / 2.0 * np.asarray(geometry.spacing)
    axes = [origin[a] + np.arange(shape[a]) * spacing[a] for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def com_head(h: Tensor, geometry: Volume3D, pool_count: int = 0) -> Tensor:
    """Spatial softmax per channel, then the expected world coordinate: (L, 3) in mm"""
    if h.ndim != 4:
        raise ShapeError(f"com_head expects (L, h, w, d) feature maps, got {h.shape}")
    coords = working_grid(geometry, pool_count, h.shape[1:])
    return ad.expected_coordinates(ad.spatial_softmax(h), coords)


def predict(params: DetectorParams, v: Volume3D) -> Tensor:
    """Detector followed by the CoM head"""
    return com_head(detector_forward(params, v), v, params.config.pool_count())
