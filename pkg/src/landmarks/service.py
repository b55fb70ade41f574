import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from pydantic import BaseModel

from ..config.settings import DATA_DIR, RUNS_DIR
from .augment import apply_affine, rc_augment, sample_affine
from .errors import ConfigError, DataError
from .metrics import report, write_report
from .phantom import load_cohort, make_cohort
from .selfcheck import run_selfcheck
from .studies import STUDIES
from .tps import fit_tps, save_transform, warp_volume
from .trainer import Trainer, TrainingPool, infer, load_checkpoint, load_params
from .types import (
    AffineRanges,
    CheckResult,
    EvalReport,
    PhantomSpec,
    RcConfig,
    RunConfig,
    StepRecord,
    StudyConfig,
    StudyResult,
    TrainConfig,
)
from .volume import load_landmarks, load_volume, save_landmarks, save_volume, volume_paths

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class LandmarkService:
    def __init__(self, data_dir: Optional[PathLike] = None, runs_dir: Optional[PathLike] = None):
        self.data_dir = Path(data_dir or DATA_DIR)
        self.runs_dir = Path(runs_dir or RUNS_DIR)

    @staticmethod
    def read_config_file(path: Optional[PathLike]) -> Dict[str, Any]:
        """JSON or TOML key-value file; an absent path gives an empty mapping"""
        if path is None:
            return {}
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {p}: {e}") from e
        try:
            loaded = tomllib.loads(text) if p.suffix == ".toml" else json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"malformed config file {p}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a key-value mapping")
        return loaded

    @staticmethod
    def write_resolved(out_dir: PathLike, config: Union[BaseModel, Dict[str, Any]],
                       run: Optional[RunConfig] = None) -> Path:
        """Snapshot of the effective configuration beside a run's outputs"""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "run": run.model_dump(mode="json") if run is not None else None,
            "config": config.model_dump(mode="json") if isinstance(config, BaseModel) else config,
        }
        path = out / "resolved_config.json"
        path.write_text(json.dumps(payload, indent=2, default=str))
        return path

    # DATA

    def generate_cohort(self, spec: PhantomSpec, n: int, out_dir: Optional[PathLike] = None,
                        test_fraction: float = 0.25, run: Optional[RunConfig] = None) -> Path:
        out = Path(out_dir) if out_dir is not None else self.data_dir
        self.write_resolved(out, {"spec": spec.model_dump(mode="json"), "n": n, "test_fraction": test_fraction}, run)
        return make_cohort(spec, n, out, test_fraction)

    def load_pool(self, manifest_path: PathLike, split: str = "train") -> TrainingPool:
        _, template, gt, subjects = load_cohort(manifest_path, split)
        if not subjects:
            raise DataError(f"cohort {manifest_path} has no '{split}' subjects")
        return TrainingPool(
            template=template,
            template_landmarks=gt,
            subjects=[v for _, v, _ in subjects],
            ground_truth=[lm for _, _, lm in subjects],
        )

    # TRAINING

    def train(
        self,
        cfg: TrainConfig,
        manifest_path: PathLike,
        out_dir: Optional[PathLike] = None,
        resume: Optional[PathLike] = None,
        on_epoch: Optional[Callable[[int, List[StepRecord]], None]] = None,
        run: Optional[RunConfig] = None,
    ) -> Dict[str, Path]:
        pool = self.load_pool(manifest_path)
        if tuple(cfg.detector.input_shape) != pool.template.shape:
            raise ConfigError(f"detector input {cfg.detector.input_shape} does not match volumes {pool.template.shape}")
        out = Path(out_dir) if out_dir is not None else self.runs_dir / "train"
        self.write_resolved(out, cfg, run)
        trainer = load_checkpoint(resume, pool, cfg) if resume else Trainer(cfg, pool)
        checkpoint = trainer.run(out, on_epoch=on_epoch)
        return {"checkpoint": checkpoint, "loss_log": out / "loss.csv"}

    # INFERENCE AND EVALUATION

    def infer_files(self, checkpoint: PathLike, volumes: Sequence[PathLike], out_dir: PathLike,
                    run: Optional[RunConfig] = None) -> List[Path]:
        params = load_params(checkpoint)
        out = Path(out_dir)
        self.write_resolved(out, {"checkpoint": str(checkpoint), "volumes": [str(v) for v in volumes]}, run)
        written = []
        for path in volumes:
            raw_path, _ = volume_paths(path)
            volume = load_volume(path)
            target = out / f"{raw_path.stem}_landmarks.json"
            save_landmarks(infer(params, volume), target)
            written.append(target)
        return written

    def evaluate_dirs(self, pred_dir: PathLike, gt_dir: PathLike, thresholds: Sequence[float],
                      out_dir: Optional[PathLike] = None, run: Optional[RunConfig] = None) -> EvalReport:
        """Pair landmark files by name; every prediction needs a ground-truth file"""
        pred_files = sorted(Path(pred_dir).glob("*.json"))
        pred_files = [p for p in pred_files if p.name != "resolved_config.json" and not p.name.startswith("report")]
        if not pred_files:
            raise DataError(f"no landmark files in {pred_dir}")
        preds, gts = [], []
        for p in pred_files:
            g = Path(gt_dir) / p.name
            if not g.exists():
                raise DataError(f"no ground truth for {p.name} in {gt_dir}")
            preds.append(load_landmarks(p))
            gts.append(load_landmarks(g))
        rep = report(preds, gts, thresholds, scan_ids=[p.name.removesuffix(".json") for p in pred_files])
        if out_dir is not None:
            self.write_resolved(out_dir, {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir),
                                          "thresholds": list(thresholds)}, run)
            write_report(rep, out_dir)
        return rep

    # TOOLS

    def warp(self, source_path: PathLike, target_path: PathLike, lam: float, out_dir: PathLike,
             volume_path: Optional[PathLike] = None, kernel: str = "squared_distance",
             run: Optional[RunConfig] = None) -> Dict[str, Path]:
        """Fit source -> target; a source-space volume is pulled into target space with the reverse fit"""
        source, target = load_landmarks(source_path), load_landmarks(target_path)
        out = Path(out_dir)
        self.write_resolved(out, {"source": str(source_path), "target": str(target_path), "lambda": lam,
                                  "kernel": kernel, "volume": str(volume_path) if volume_path else None}, run)
        outputs = {"transform": out / "tps.json"}
        save_transform(fit_tps(source, target, lam, kernel), outputs["transform"])
        if volume_path is not None:
            volume = load_volume(volume_path)
            warped = warp_volume(volume, fit_tps(target, source, lam, kernel))
            outputs["volume"] = out / "warped"
            save_volume(warped, outputs["volume"])
        return outputs

    def preview_augment(self, volume_path: PathLike, mode: str, seed: int, out: PathLike,
                        rc: Optional[RcConfig] = None, affine: Optional[AffineRanges] = None,
                        run: Optional[RunConfig] = None) -> Path:
        volume = load_volume(volume_path)
        if mode == "rc":
            augmented = rc_augment(volume, rc or RcConfig(), seed)
            params: Dict[str, Any] = {"mode": mode, "seed": seed, "rc": (rc or RcConfig()).model_dump(mode="json")}
        elif mode == "affine":
            aug, matrix, _ = sample_affine(affine or AffineRanges(), seed, volume)
            augmented = apply_affine(volume, aug)
            params = {"mode": mode, "seed": seed, "augmentation": aug.model_dump(mode="json"),
                      "matrix": matrix.tolist()}
        else:
            raise ConfigError(f"unknown augmentation mode {mode!r}; expected 'rc' or 'affine'")
        save_volume(augmented, out)
        raw_path, _ = volume_paths(out)
        self.write_resolved(raw_path.parent, {"volume": str(volume_path), "out": str(out), **params}, run)
        raw_path.with_name(raw_path.stem + "_augment.json").write_text(json.dumps(params, indent=2))
        return raw_path

    def selfcheck(self, seed: int = 0) -> List[CheckResult]:
        return run_selfcheck(seed)

    def study(self, name: str, cfg: StudyConfig, out_dir: Optional[PathLike] = None,
              run: Optional[RunConfig] = None) -> StudyResult:
        if name not in STUDIES:
            raise ConfigError(f"unknown study {name!r}; choose from {sorted(STUDIES)}")
        out = Path(out_dir) if out_dir is not None else self.runs_dir / f"study_{name}"
        self.write_resolved(out, cfg, run)
        result = STUDIES[name](cfg)
        (out / f"{name}.json").write_text(result.model_dump_json(indent=2))
        return result
