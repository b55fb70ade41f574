from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .autodiff import Tensor

Vec3 = Tuple[float, float, float]


# VALUE TYPES

class Volume3D(BaseModel):
    """Dense scalar volume indexed [x, y, z] with world = origin + index * spacing (mm)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    @field_validator("data", mode="before")
    @classmethod
    def _as_grid(cls, v):
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 2:
            raise ValueError(f"volume data must be a 3D grid with every side >= 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite voxels")
        return arr

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, v):
        if any(s <= 0 or not np.isfinite(s) for s in v):
            raise ValueError(f"spacing components must be positive, got {v}")
        return v

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def index_to_world(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=np.float64) * np.asarray(self.spacing)

    def world_to_index(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_grid(self) -> np.ndarray:
        """World coordinates of every voxel, shape (H, W, D, 3)"""
        axes = [self.origin[a] + np.arange(self.shape[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def center(self) -> np.ndarray:
        return self.index_to_world((np.asarray(self.shape) - 1) / 2.0)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.index_to_world((0, 0, 0)), self.index_to_world(np.asarray(self.shape) - 1)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data=data, spacing=self.spacing, origin=self.origin)

    def same_geometry(self, other: "Volume3D") -> bool:
        return self.shape == other.shape and self.spacing == other.spacing and self.origin == other.origin


class LandmarkSet(BaseModel):
    """Ordered landmarks in world coordinates (mm); row i is always landmark i"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    points: np.ndarray

    @field_validator("points", mode="before")
    @classmethod
    def _as_points(cls, v):
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
            raise ValueError(f"landmarks must be a non-empty (L, 3) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("landmarks contain non-finite coordinates")
        return arr

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def to_list(self) -> List[List[float]]:
        return self.points.tolist()


class TpsTransform(BaseModel):
    """Fitted thin-plate spline; coefficients act on millimetre coordinates"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    W: Tensor = Field(..., description="(4, 3) affine block acting on [x, 1]")
    V: Tensor = Field(..., description="(N, 3) non-affine coefficients")
    source_points: Tensor = Field(..., description="(N, 3) control points in mm")
    lam: float = Field(..., ge=0.0, description="Regularisation weight")
    kernel: Literal["squared_distance", "distance"] = "squared_distance"

    @property
    def count(self) -> int:
        return int(self.source_points.shape[0])


# AUGMENTATION CONFIG

class RcConfig(BaseModel):
    """Random-convolution contrast cascade"""
    model_config = ConfigDict(extra="forbid")

    layers: int = Field(default=5, ge=1)
    weight_low: float = 0.0
    weight_high: float = 2.0
    slope: float = Field(default=0.2, ge=0.0)
    channels: int = Field(default=4, ge=1, description="Hidden width of the pointwise cascade")
    kernel_size: int = Field(default=1, description="1 for training; 3 or 5 only for blur previews")

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, v):
        if v not in (1, 3, 5):
            raise ValueError("kernel_size must be 1, 3 or 5")
        return v

    @model_validator(mode="after")
    def _ordered_range(self):
        if not self.weight_low < self.weight_high:
            raise ValueError("weight_low must be below weight_high")
        return self


class AffineRanges(BaseModel):
    """Uniform sampling ranges for the random affine augmentation"""
    model_config = ConfigDict(extra="forbid")

    rotation_deg: Tuple[float, float] = (-180.0, 180.0)
    translation_vox: Tuple[float, float] = (-15.0, 15.0)
    scale: Tuple[float, float] = (0.8, 1.2)
    shear: Tuple[float, float] = (-0.1, 0.1)
    rotation_axes: Tuple[bool, bool, bool] = (True, True, True)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("rotation_deg", "translation_vox", "scale", "shear"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        return self

    @classmethod
    def identity(cls) -> "AffineRanges":
        return cls(rotation_deg=(0, 0), translation_vox=(0, 0), scale=(1, 1), shear=(0, 0))


class AffineAug(BaseModel):
    """One sampled affine augmentation, anchored at a volume center"""
    model_config = ConfigDict(frozen=True)

    rotation_deg: Vec3 = (0.0, 0.0, 0.0)
    translation_vox: Vec3 = (0.0, 0.0, 0.0)
    scale: Vec3 = (1.0, 1.0, 1.0)
    shear: Vec3 = (0.0, 0.0, 0.0)
    center: Vec3 = (0.0, 0.0, 0.0)
    spacing: Vec3 = (1.0, 1.0, 1.0)


# MODEL CONFIG

class BlockSpec(BaseModel):
    """conv3d -> instance norm -> relu, optionally followed by 2x max pooling"""
    model_config = ConfigDict(extra="forbid")

    channels: int = Field(..., ge=1)
    pool: bool = False


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blocks: List[BlockSpec] = Field(
        default_factory=lambda: [
            BlockSpec(channels=8, pool=True),
            BlockSpec(channels=16, pool=True),
            BlockSpec(channels=32, pool=True),
            BlockSpec(channels=32),
            BlockSpec(channels=16),
        ]
    )
    landmarks: int = Field(default=6, ge=1)
    input_shape: Tuple[int, int, int] = (32, 32, 32)
    kernel_size: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _spatial_survives(self):
        if not self.blocks:
            raise ValueError("detector needs at least one block")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if min(self.working_shape()) < 1:
            raise ValueError(f"input {self.input_shape} is pooled away by {self.pool_count()} pooling blocks")
        return self

    def pool_count(self) -> int:
        return sum(1 for b in self.blocks if b.pool)

    def working_shape(self) -> Tuple[int, int, int]:
        shape = list(self.input_shape)
        for block in self.blocks:
            if block.pool:
                shape = [s // 2 for s in shape]
        return tuple(shape)

    @classmethod
    def desk(cls, landmarks: int = 6, input_shape: Tuple[int, int, int] = (32, 32, 32)) -> "DetectorConfig":
        return cls(landmarks=landmarks, input_shape=input_shape)

    @classmethod
    def full_scale(cls, landmarks: int = 32, input_shape: Tuple[int, int, int] = (193, 229, 193)) -> "DetectorConfig":
        widths = [32, 64, 128, 256, 512, 256, 128, 64, 32]
        return cls(
            blocks=[BlockSpec(channels=c, pool=i < 4) for i, c in enumerate(widths)],
            landmarks=landmarks,
            input_shape=input_shape,
        )


# TRAINING CONFIG

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    M: int = Field(default=2, ge=2, description="Subjects sampled per step")
    epochs: int = Field(default=1, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1, description="Caps the total step count")
    lr_init: float = Field(default=1e-4, gt=0)
    lr_min: float = Field(default=1e-6, ge=0)
    lambda_range: Tuple[float, float] = (1e-3, 10.0)
    objective: Literal["curriculum", "registration_only", "supervised"] = "curriculum"
    use_rc: bool = True
    use_affine: bool = True
    affine: AffineRanges = Field(default_factory=AffineRanges)
    rc: RcConfig = Field(default_factory=RcConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    tps_kernel: Literal["squared_distance", "distance"] = "squared_distance"
    seed: int = 0
    checkpoint_every: int = Field(default=0, ge=0, description="Steps between checkpoints; 0 keeps only the final one")
    max_resample: int = Field(default=10, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @model_validator(mode="after")
    def _consistent(self):
        if not self.lr_min < self.lr_init:
            raise ValueError("lr_min must be below lr_init")
        lo, hi = self.lambda_range
        if not 0 < lo <= hi:
            raise ValueError("lambda_range must satisfy 0 < low <= high for log-uniform sampling")
        if self.rc.kernel_size != 1:
            raise ValueError("training requires 1x1x1 random convolutions")
        return self


class StepRecord(BaseModel):
    """One row of the training loss log"""
    step: int
    eta: float
    alpha: float
    reg: float
    cons1: float
    cons2: float
    total: float
    lam: float
    lr: float

    def csv_row(self) -> List[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in CSV_COLUMNS[1:-2]] + [
            repr(self.lam),
            repr(self.lr),
        ]


CSV_COLUMNS = ["step", "eta", "alpha", "reg", "cons1", "cons2", "total", "lambda", "lr"]


class SubjectSample(BaseModel):
    """Per-subject state inside one training step"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pre_rc: Volume3D
    detector_input: Volume3D
    predicted: Tensor = Field(..., description="(L, 3) predicted landmarks in mm")
    forward: TpsTransform = Field(..., description="Predicted landmarks -> template landmarks")
    reverse: TpsTransform = Field(..., description="Template landmarks -> predicted landmarks")


class StepBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    subjects: List[SubjectSample]
    template: Volume3D
    template_landmarks: LandmarkSet

    @model_validator(mode="after")
    def _pairs(self):
        if len(self.subjects) < 2:
            raise ValueError("a step batch needs at least two subjects")
        return self


# PHANTOM SCHEMAS

class PhantomSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid_size: int = Field(default=32, ge=8)
    spacing: float = Field(default=1.0, gt=0)
    landmarks: int = Field(default=6, ge=1)
    shells: int = Field(default=2, ge=0, description="Nested ellipsoid shells")
    blob_sigma: float = Field(default=1.5, gt=0, description="Blob width in voxels")
    blob_amplitude: float = Field(default=0.8, gt=0)
    margin: int = Field(default=4, ge=3, description="Minimum distance of a site from the border, voxels")
    min_separation: float = Field(default=5.0, ge=0, description="Minimum distance between sites, voxels")
    jitter_mm: float = Field(default=1.5, ge=0, description="Control-point jitter of the subject deformation")
    control_grid: int = Field(default=3, ge=2, description="Control points per axis")
    contrast: Literal["identity", "gamma", "rc"] = "identity"
    gamma: float = Field(default=1.0, gt=0)
    noise_sigma: float = Field(default=0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _room_for_sites(self):
        if 2 * self.margin >= self.grid_size:
            raise ValueError("margin leaves no room for landmark sites")
        return self


class CohortEntry(BaseModel):
    id: str
    seed: int
    split: Literal["train", "test"]
    volume: str
    landmarks: str


class CohortManifest(BaseModel):
    version: int = 1
    spec: PhantomSpec
    template_volume: str
    template_landmarks: str
    subjects: List[CohortEntry] = Field(default_factory=list)

    def split(self, name: str) -> List[CohortEntry]:
        return [s for s in self.subjects if s.split == name]


# CHECKPOINT SCHEMAS

class TensorEntry(BaseModel):
    name: str
    group: Literal["param", "adam_m", "adam_v"]
    shape: List[int]
    offset: int
    count: int


class CheckpointManifest(BaseModel):
    version: int
    train_config: TrainConfig
    step: int
    epoch: int
    seed: int
    adam_step: int
    rng_state: Dict
    tensors: List[TensorEntry]
    blob: str
    sha256: str


# EVALUATION SCHEMAS

class EvalReport(BaseModel):
    scan_ids: List[str] = Field(default_factory=list)
    errors: List[List[float]] = Field(..., description="Radial errors (mm), one row per scan")
    mre_mean: float
    mre_std: float
    thresholds: List[float] = Field(default_factory=list)
    sdr: List[float] = Field(default_factory=list, description="Percent of errors strictly below each threshold")
    per_landmark_mre: List[float] = Field(default_factory=list)


class CheckResult(BaseModel):
    suite: str
    name: str
    value: float
    tolerance: float
    passed: bool


# STUDY SCHEMAS

STUDY_GRID = 48


def _study_train() -> TrainConfig:
    # 64 scans at M = 2 give 32 steps per epoch; 94 epochs reach the 3000-step cap
    return TrainConfig(
        M=2,
        epochs=94,
        max_steps=3000,
        lr_init=3e-3,
        lr_min=1e-5,
        detector=DetectorConfig.desk(input_shape=(STUDY_GRID,) * 3),
        affine=AffineRanges(
            rotation_deg=(-45.0, 45.0),
            translation_vox=(-3.0, 3.0),
            scale=(0.95, 1.05),
            shear=(-0.02, 0.02),
            rotation_axes=(False, False, True),
        ),
    )


class StudyConfig(BaseModel):
    """Scaled-down experiment on an in-memory phantom cohort"""
    model_config = ConfigDict(extra="forbid")

    phantom: PhantomSpec = Field(
        default_factory=lambda: PhantomSpec(grid_size=STUDY_GRID, margin=10, min_separation=6.0, noise_sigma=0.01)
    )
    n_train: int = Field(default=64, ge=2)
    n_test: int = Field(default=20, ge=1)
    train: TrainConfig = Field(default_factory=_study_train)
    template_seed: Optional[int] = Field(default=None, description="Seed of the alternate template; phantom seed + 1 when unset")
    angles_deg: List[float] = Field(default_factory=lambda: [0.0, 15.0, 30.0, 45.0])
    gammas: List[float] = Field(default_factory=lambda: [0.5, 2.0])
    thresholds: List[float] = Field(default_factory=lambda: [3.0, 6.0, 9.0])

    @model_validator(mode="after")
    def _shapes_agree(self):
        grid = (self.phantom.grid_size,) * 3
        if tuple(self.train.detector.input_shape) != grid:
            raise ValueError(f"detector input {self.train.detector.input_shape} does not match phantom grid {grid}")
        if self.train.detector.landmarks != self.phantom.landmarks:
            raise ValueError("detector landmark count must equal the phantom landmark count")
        return self


class StudyResult(BaseModel):
    name: str
    reports: Dict[str, EvalReport]
    checks: List[CheckResult] = Field(default_factory=list)


# CLI SCHEMAS

class RunConfig(BaseModel):
    """Resolved invocation of one subcommand"""
    model_config = ConfigDict(extra="forbid")

    subcommand: str
    config_path: Optional[str] = None
    out_dir: str
    seed: Optional[int] = None
    options: Dict = Field(default_factory=dict)
