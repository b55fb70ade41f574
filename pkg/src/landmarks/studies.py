"""Desk-scale experiments on phantom cohorts: objective ablation, contrast shift, added rotation,
template choice and the end-to-end acceptance run."""
from __future__ import annotations

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .augment import apply_affine, apply_affine_points
from .metrics import report
from .model import DetectorParams, init_params
from .phantom import make_subject, make_template, subject_seeds
from .trainer import Trainer, TrainingPool, infer
from .types import (
    AffineAug,
    AffineRanges,
    CheckResult,
    EvalReport,
    LandmarkSet,
    StudyConfig,
    StudyResult,
    TrainConfig,
    Volume3D,
)

logger = logging.getLogger(__name__)

Pair = Tuple[Volume3D, LandmarkSet]


class PhantomCohort(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    template: Volume3D
    template_landmarks: LandmarkSet
    train: List[Tuple[Volume3D, LandmarkSet]]
    test: List[Tuple[Volume3D, LandmarkSet]]


def build_cohort(cfg: StudyConfig) -> PhantomCohort:
    template, gt = make_template(cfg.phantom)
    seeds = subject_seeds(cfg.phantom, cfg.n_train + cfg.n_test)
    pairs = [make_subject(template, gt, cfg.phantom, s) for s in seeds]
    return PhantomCohort(template=template, template_landmarks=gt, train=pairs[:cfg.n_train], test=pairs[cfg.n_train:])


def train_variant(cohort: PhantomCohort, train_cfg: TrainConfig) -> DetectorParams:
    pool = TrainingPool(
        template=cohort.template,
        template_landmarks=cohort.template_landmarks,
        subjects=[v for v, _ in cohort.train],
        ground_truth=[lm for _, lm in cohort.train],
    )
    trainer = Trainer(train_cfg, pool)
    trainer.run()
    return trainer.params


def evaluate(params: DetectorParams, pairs: Sequence[Pair], thresholds: Sequence[float]) -> EvalReport:
    return report([infer(params, v) for v, _ in pairs], [lm for _, lm in pairs], thresholds)


def with_gamma(pairs: Sequence[Pair], gamma: float) -> List[Pair]:
    return [(v.with_data(np.clip(v.data, 0.0, 1.0) ** gamma), lm) for v, lm in pairs]


def with_rotation(pairs: Sequence[Pair], angle_deg: float) -> List[Pair]:
    """Rotate each scan and its landmarks about the z axis through the volume center"""
    out = []
    for v, lm in pairs:
        aug = AffineAug(rotation_deg=(0.0, 0.0, angle_deg), center=tuple(v.center()), spacing=v.spacing)
        out.append((apply_affine(v, aug), apply_affine_points(lm, aug)))
    return out


def ablation_study(cfg: StudyConfig) -> StudyResult:
    """Untrained, full curriculum, no consistency term, no RC and the supervised baseline"""
    cohort = build_cohort(cfg)
    base = cfg.train
    variants: Dict[str, TrainConfig] = {
        "full": base,
        "registration_only": base.model_copy(update={"objective": "registration_only"}),
        "no_rc": base.model_copy(update={"use_rc": False}),
        "supervised": base.model_copy(update={"objective": "supervised"}),
    }
    reports = {"untrained": evaluate(init_params(base.detector, base.seed), cohort.test, cfg.thresholds)}
    for name, train_cfg in variants.items():
        reports[name] = evaluate(train_variant(cohort, train_cfg), cohort.test, cfg.thresholds)
        logger.info("ablation variant=%s mre=%.3f", name, reports[name].mre_mean)
    return StudyResult(name="ablation", reports=reports)


def contrast_study(cfg: StudyConfig) -> StudyResult:
    """Train with RC on and off; test on the training contrast and on gamma-shifted scans"""
    cohort = build_cohort(cfg)
    reports: Dict[str, EvalReport] = {}
    for use_rc in (True, False):
        params = train_variant(cohort, cfg.train.model_copy(update={"use_rc": use_rc}))
        tag = "rc" if use_rc else "no_rc"
        reports[f"{tag}/same"] = evaluate(params, cohort.test, cfg.thresholds)
        for gamma in cfg.gammas:
            reports[f"{tag}/gamma{gamma:g}"] = evaluate(params, with_gamma(cohort.test, gamma), cfg.thresholds)
    return StudyResult(name="contrast", reports=reports)


def rotation_study(cfg: StudyConfig) -> StudyResult:
    """MRE under added test rotations for a detector trained with z-rotation augmentation"""
    cohort = build_cohort(cfg)
    widest = max(abs(a) for a in cfg.angles_deg) if cfg.angles_deg else 0.0
    affine = AffineRanges(
        rotation_deg=(-widest, widest),
        translation_vox=(-2.0, 2.0),
        scale=(0.95, 1.05),
        shear=(-0.02, 0.02),
        rotation_axes=(False, False, True),
    )
    params = train_variant(cohort, cfg.train.model_copy(update={"use_affine": True, "affine": affine}))
    reports = {
        f"{angle:g}deg": evaluate(params, with_rotation(cohort.test, angle), cfg.thresholds) for angle in cfg.angles_deg
    }
    return StudyResult(name="rotation", reports=reports)


def single_subject_template(cohort: PhantomCohort, cfg: StudyConfig) -> Pair:
    """One extra deformed, noisy instance of the default template with its exact landmarks"""
    seed = cfg.template_seed if cfg.template_seed is not None else cfg.phantom.seed + 1
    return make_subject(cohort.template, cohort.template_landmarks, cfg.phantom, seed)


def template_study(cfg: StudyConfig) -> StudyResult:
    """Same cohort trained against the population template and against a single-subject template"""
    cohort = build_cohort(cfg)
    volume, landmarks = single_subject_template(cohort, cfg)
    alternate = cohort.model_copy(update={"template": volume, "template_landmarks": landmarks})
    reports: Dict[str, EvalReport] = {}
    for name, source in (("default", cohort), ("single_subject", alternate)):
        reports[name] = evaluate(train_variant(source, cfg.train), cohort.test, cfg.thresholds)
        logger.info("template variant=%s mre=%.3f", name, reports[name].mre_mean)
    return StudyResult(name="template", reports=reports)


# ACCEPTANCE

MAX_TRAINING_STEPS = 3000


def planned_steps(cfg: StudyConfig) -> int:
    total = cfg.train.epochs * max(1, cfg.n_train // cfg.train.M)
    return min(total, cfg.train.max_steps) if cfg.train.max_steps else total


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else float("inf")


def _check(name: str, value: float, tolerance: float) -> CheckResult:
    return CheckResult(suite="acceptance", name=name, value=float(value), tolerance=tolerance,
                       passed=bool(value <= tolerance))


def acceptance_checks(reports: Dict[str, EvalReport], cfg: StudyConfig) -> List[CheckResult]:
    """Pass/fail verdicts over the reports of ``acceptance_study``; every check passes when value <= tolerance"""
    full = reports["full"].mre_mean
    checks = [
        _check("training_steps", planned_steps(cfg), MAX_TRAINING_STEPS),
        _check("heldout_mre_voxels", full / cfg.phantom.spacing, 2.0),
        _check("mre_over_untrained", _ratio(full, reports["untrained"].mre_mean), 1.0 / 5.0),
        _check("mre_over_registration_only", _ratio(full, reports["registration_only"].mre_mean), 1.0 / 3.0),
    ]
    if cfg.gammas:
        rc_gamma = max(reports[f"full/gamma{g:g}"].mre_mean for g in cfg.gammas)
        no_rc_gamma = float(np.mean([reports[f"no_rc/gamma{g:g}"].mre_mean for g in cfg.gammas]))
        checks.append(_check("rc_gamma_over_same_contrast", _ratio(rc_gamma, full), 1.5))
        checks.append(_check("no_rc_same_over_gamma", _ratio(reports["no_rc"].mre_mean, no_rc_gamma), 0.5))
    if cfg.angles_deg:
        rotated = max(reports[f"full/{a:g}deg"].mre_mean for a in cfg.angles_deg)
        checks.append(_check("rotation_mre_increase", _ratio(rotated, full) - 1.0, 0.5))
    return checks


def acceptance_study(cfg: StudyConfig) -> StudyResult:
    """Full method against its untrained start, its ablations, gamma-shifted and rotated test scans"""
    cohort = build_cohort(cfg)
    base = cfg.train
    full = train_variant(cohort, base)
    no_rc = train_variant(cohort, base.model_copy(update={"use_rc": False}))
    registration_only = train_variant(cohort, base.model_copy(update={"objective": "registration_only"}))

    reports = {
        "untrained": evaluate(init_params(base.detector, base.seed), cohort.test, cfg.thresholds),
        "full": evaluate(full, cohort.test, cfg.thresholds),
        "registration_only": evaluate(registration_only, cohort.test, cfg.thresholds),
        "no_rc": evaluate(no_rc, cohort.test, cfg.thresholds),
    }
    for gamma in cfg.gammas:
        shifted = with_gamma(cohort.test, gamma)
        reports[f"full/gamma{gamma:g}"] = evaluate(full, shifted, cfg.thresholds)
        reports[f"no_rc/gamma{gamma:g}"] = evaluate(no_rc, shifted, cfg.thresholds)
    for angle in cfg.angles_deg:
        reports[f"full/{angle:g}deg"] = evaluate(full, with_rotation(cohort.test, angle), cfg.thresholds)

    checks = acceptance_checks(reports, cfg)
    for c in checks:
        logger.info("acceptance check=%s value=%.4g tolerance=%.4g passed=%s", c.name, c.value, c.tolerance, c.passed)
    return StudyResult(name="acceptance", reports=reports, checks=checks)


STUDIES = {
    "ablation": ablation_study,
    "acceptance": acceptance_study,
    "contrast": contrast_study,
    "rotation": rotation_study,
    "template": template_study,
}
