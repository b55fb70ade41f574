"""Training loop: sampling, augmentation, in-graph TPS fits, Adam with cosine-annealed lr, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from ..config.settings import CHECKPOINT_VERSION
from . import autodiff as ad
from .augment import apply_affine, apply_affine_points, rc_augment, sample_affine
from .autodiff import Tensor
from .errors import ConfigError, DataError, NonFiniteError, NumericalError, SingularSystemError
from .losses import alpha, loss_components, supervised_loss
from .model import DetectorParams, init_params, param_shapes, predict
from .tps import fit_tps
from .types import (
    CSV_COLUMNS,
    CheckpointManifest,
    LandmarkSet,
    StepBatch,
    StepRecord,
    SubjectSample,
    TensorEntry,
    TrainConfig,
    Volume3D,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class TrainingPool(BaseModel):
    """Template, its landmarks and the unlabeled scans sampled during training"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    template: Volume3D
    template_landmarks: LandmarkSet
    subjects: List[Volume3D]
    ground_truth: Optional[List[LandmarkSet]] = None

    @model_validator(mode="after")
    def _consistent(self):
        if not self.subjects:
            raise ValueError("training pool is empty")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.subjects):
            raise ValueError("ground truth must list one landmark set per subject")
        return self


# SCHEDULE

def eta_at(step: int, total_steps: int) -> float:
    """Training progress in [0, 1]; the first step is 0 and the last is 1"""
    return min(step / max(total_steps - 1, 1), 1.0)


def cosine_lr(eta: float, lr_init: float, lr_min: float) -> float:
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * eta))


def sample_lambda(rng: np.random.Generator, lambda_range: Tuple[float, float]) -> float:
    lo, hi = lambda_range
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


# OPTIMIZER

class AdamState:
    """First and second moment accumulators keyed by parameter name"""

    def __init__(self, params: DetectorParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}

    def update(self, params: DetectorParams, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.values = p.values - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


# RNG STATE

def _rng_state(rng: np.random.Generator) -> Dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _restore_rng(saved: Dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": saved["bit_generator"],
        "state": {"state": int(saved["state"]), "inc": int(saved["inc"])},
        "has_uint32": saved["has_uint32"],
        "uinteger": saved["uinteger"],
    }
    return rng


class Trainer:
    """Owns parameters, optimizer state and the sampling stream of one training run"""

    def __init__(self, cfg: TrainConfig, pool: TrainingPool, params: Optional[DetectorParams] = None):
        if len(pool.subjects) < cfg.M:
            raise ConfigError(f"pool of {len(pool.subjects)} scans cannot supply M={cfg.M} distinct subjects")
        if cfg.objective == "supervised" and pool.ground_truth is None:
            raise ConfigError("supervised objective needs ground-truth landmarks for every subject")
        if pool.template_landmarks.count != cfg.detector.landmarks:
            raise ConfigError(
                f"template has {pool.template_landmarks.count} landmarks, detector predicts {cfg.detector.landmarks}"
            )
        self.cfg = cfg
        self.pool = pool
        self.params = params or init_params(cfg.detector, cfg.seed)
        self.adam = AdamState(self.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.step = 0
        self.history: List[StepRecord] = []

    # ---------- schedule ----------

    def steps_per_epoch(self) -> int:
        return max(1, len(self.pool.subjects) // self.cfg.M)

    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch()
        return min(total, self.cfg.max_steps) if self.cfg.max_steps else total

    def epoch(self) -> int:
        return self.step // self.steps_per_epoch()

    # ---------- one step ----------

    def _draw(self) -> Dict:
        cfg = self.cfg
        indices = self.rng.choice(len(self.pool.subjects), size=cfg.M, replace=False)
        seeds = self.rng.integers(0, 2**31 - 1, size=(cfg.M, 2))
        return {"indices": [int(i) for i in indices], "seeds": seeds.tolist(), "lam": sample_lambda(self.rng, cfg.lambda_range)}

    def _augment(self, index: int, affine_seed: int, rc_seed: int) -> Tuple[Volume3D, Volume3D, Optional[LandmarkSet]]:
        cfg = self.cfg
        vol = self.pool.subjects[index]
        gt = self.pool.ground_truth[index] if self.pool.ground_truth is not None else None
        if cfg.use_affine:
            aug, _, _ = sample_affine(cfg.affine, affine_seed, vol)
            vol = apply_affine(vol, aug)
            gt = apply_affine_points(gt, aug) if gt is not None else None
        detector_input = rc_augment(vol, cfg.rc, rc_seed) if cfg.use_rc else vol
        return vol, detector_input, gt

    def _losses(self, draw: Dict, eta: float) -> Dict[str, Tensor]:
        cfg = self.cfg
        lam = draw["lam"]
        template_points = self.pool.template_landmarks.points
        subjects, predictions, truths = [], [], []
        for index, (affine_seed, rc_seed) in zip(draw["indices"], draw["seeds"]):
            pre_rc, detector_input, gt = self._augment(index, affine_seed, rc_seed)
            predicted = predict(self.params, detector_input)
            predictions.append(predicted)
            truths.append(gt)
            if cfg.objective == "supervised":
                continue
            subjects.append(
                SubjectSample(
                    pre_rc=pre_rc,
                    detector_input=detector_input,
                    predicted=predicted,
                    forward=fit_tps(predicted, template_points, lam, cfg.tps_kernel),
                    reverse=fit_tps(template_points, predicted, lam, cfg.tps_kernel),
                )
            )
        if cfg.objective == "supervised":
            zero = Tensor(0.0)
            return {"reg": zero, "cons1": zero, "cons2": zero, "total": supervised_loss(predictions, truths)}
        batch = StepBatch(subjects=subjects, template=self.pool.template, template_landmarks=self.pool.template_landmarks)
        return loss_components(batch, eta, cfg.objective)

    def train_step(self) -> StepRecord:
        cfg = self.cfg
        eta = eta_at(self.step, self.total_steps())
        lr = cosine_lr(eta, cfg.lr_init, cfg.lr_min)
        for attempt in range(cfg.max_resample + 1):
            draw = self._draw()
            try:
                terms = self._losses(draw, eta)
                break
            except SingularSystemError as e:
                logger.warning("skipped step=%d lambda=%.4g attempt=%d reason=%s", self.step, draw["lam"], attempt, e)
        else:
            raise NumericalError(f"step {self.step}: thin-plate spline singular after {cfg.max_resample} resamples")

        ad.zero_grad(self.params.tensors())
        try:
            ad.backward(terms["total"])
        except NonFiniteError as e:
            raise NonFiniteError(f"step {self.step} lambda={draw['lam']:.4g}: {e}") from e
        self.adam.update(self.params, lr)

        record = StepRecord(
            step=self.step,
            eta=eta,
            alpha=alpha(eta) if cfg.objective == "curriculum" else 0.0,
            reg=terms["reg"].item(),
            cons1=terms["cons1"].item(),
            cons2=terms["cons2"].item(),
            total=terms["total"].item(),
            lam=draw["lam"],
            lr=lr,
        )
        self.history.append(record)
        self.step += 1
        return record

    # ---------- loop ----------

    def run(
        self,
        out_dir: Optional[PathLike] = None,
        on_epoch: Optional[Callable[[int, List[StepRecord]], None]] = None,
    ) -> Optional[Path]:
        """Train to ``total_steps``; returns the final checkpoint path when ``out_dir`` is given"""
        out = Path(out_dir) if out_dir is not None else None
        log_path = out / "loss.csv" if out is not None else None
        if log_path is not None:
            out.mkdir(parents=True, exist_ok=True)
            if not log_path.exists() or self.step == 0:
                with log_path.open("w", newline="") as fh:
                    csv.writer(fh).writerow(CSV_COLUMNS)

        total = self.total_steps()
        epoch_records: List[StepRecord] = []
        while self.step < total:
            record = self.train_step()
            epoch_records.append(record)
            if log_path is not None:
                with log_path.open("a", newline="") as fh:
                    csv.writer(fh).writerow(record.csv_row())
            if out is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                save_checkpoint(self, out / f"checkpoint_step{self.step:06d}")
            if self.step % self.steps_per_epoch() == 0 or self.step == total:
                if on_epoch is not None:
                    on_epoch((self.step - 1) // self.steps_per_epoch(), epoch_records)
                epoch_records = []
        if out is None:
            return None
        return save_checkpoint(self, out / "checkpoint_final")


# CHECKPOINTS

def _checkpoint_paths(path: PathLike) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_checkpoint(trainer: Trainer, path: PathLike) -> Path:
    """JSON manifest plus a little-endian float64 blob of params and Adam moments"""
    manifest_path, blob_path = _checkpoint_paths(path)
    entries, chunks, offset = [], [], 0
    for group, source in (
        ("param", {n: t.values for n, t in trainer.params.items()}),
        ("adam_m", trainer.adam.m),
        ("adam_v", trainer.adam.v),
    ):
        for name in trainer.params.names():
            arr = np.asarray(source[name], dtype="<f8")
            entries.append(TensorEntry(name=name, group=group, shape=list(arr.shape), offset=offset, count=arr.size))
            chunks.append(arr.ravel())
            offset += arr.size
    blob = np.concatenate(chunks).tobytes()
    manifest = CheckpointManifest(
        version=CHECKPOINT_VERSION,
        train_config=trainer.cfg,
        step=trainer.step,
        epoch=trainer.epoch(),
        seed=trainer.cfg.seed,
        adam_step=trainer.adam.t,
        rng_state=_rng_state(trainer.rng),
        tensors=entries,
        blob=blob_path.name,
        sha256=hashlib.sha256(blob).hexdigest(),
    )
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(blob)
        manifest_path.write_text(manifest.model_dump_json(indent=2))
    except OSError as e:
        raise DataError(f"cannot write checkpoint {manifest_path}: {e}") from e
    logger.info("checkpoint step=%d path=%s", trainer.step, manifest_path)
    return manifest_path


def read_checkpoint(path: PathLike) -> Tuple[CheckpointManifest, Dict[str, Dict[str, np.ndarray]]]:
    """Validated manifest and tensors grouped as {group: {name: array}}"""
    manifest_path, _ = _checkpoint_paths(path)
    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint {manifest_path}") from e
    except ValidationError as e:
        raise DataError(f"malformed checkpoint manifest {manifest_path}: {e.errors()[0]['msg']}") from e
    if manifest.version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version mismatch: file {manifest.version}, expected {CHECKPOINT_VERSION}")
    blob_path = manifest_path.with_name(manifest.blob)
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint blob {blob_path}") from e
    if hashlib.sha256(blob).hexdigest() != manifest.sha256:
        raise DataError(f"corrupt checkpoint blob {blob_path}: checksum mismatch")
    values = np.frombuffer(blob, dtype="<f8")
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest.tensors:
        if entry.offset + entry.count > values.size:
            raise DataError(f"corrupt checkpoint blob {blob_path}: tensor {entry.name} out of range")
        groups[entry.group][entry.name] = values[entry.offset:entry.offset + entry.count].reshape(entry.shape).copy()
    return manifest, groups


def load_params(path: PathLike, detector=None) -> DetectorParams:
    """Parameters of a checkpoint; ``detector`` must match the stored config when given"""
    manifest, groups = read_checkpoint(path)
    stored = manifest.train_config.detector
    if detector is not None and detector != stored:
        raise ConfigError("checkpoint detector config does not match the requested detector")
    shapes = param_shapes(stored)
    stored_shapes = {n: tuple(a.shape) for n, a in groups["param"].items()}
    if stored_shapes != shapes:
        raise DataError("checkpoint tensors do not match the detector layout")
    return DetectorParams(stored, {n: ad.parameter(groups["param"][n]) for n in shapes})


def load_checkpoint(path: PathLike, pool: TrainingPool, cfg: Optional[TrainConfig] = None) -> Trainer:
    """Rebuild a trainer that continues the stored run exactly"""
    manifest, groups = read_checkpoint(path)
    cfg = cfg or manifest.train_config
    if cfg.detector != manifest.train_config.detector:
        raise ConfigError("checkpoint detector config does not match the training config")
    trainer = Trainer(cfg, pool, params=load_params(path, cfg.detector))
    for name in trainer.params.names():
        trainer.adam.m[name] = groups["adam_m"][name]
        trainer.adam.v[name] = groups["adam_v"][name]
    trainer.adam.t = manifest.adam_step
    trainer.rng = _restore_rng(manifest.rng_state)
    trainer.step = manifest.step
    return trainer


# INFERENCE

def infer(params: DetectorParams, v: Volume3D) -> LandmarkSet:
    """Detector plus CoM head on an unaugmented volume"""
    return LandmarkSet(points=predict(params.detached(), v).values)
