"""Oracle suites: finite-difference gradients, TPS identities, loss and metric hand values."""
from __future__ import annotations

import itertools
import logging
import math
from typing import Callable, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import alpha, consistency_from_warped, mix, registration_loss, total_loss
from .metrics import mre, sdr
from .model import init_params, predict
from .phantom import make_subject, make_template
from .tps import bending_energy, constraint_residuals, eval_tps, fit_affine, fit_tps, kernel_matrix
from .types import (
    BlockSpec,
    CheckResult,
    DetectorConfig,
    LandmarkSet,
    PhantomSpec,
    StepBatch,
    SubjectSample,
)

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4


def _check(suite: str, name: str, value: float, tolerance: float) -> CheckResult:
    return CheckResult(suite=suite, name=name, value=float(value), tolerance=tolerance, passed=bool(value <= tolerance))


def _away_from_zero(rng: np.random.Generator, shape, gap: float = 0.1) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# AUTODIFF

def gradient_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    x4 = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    coords = rng.normal(size=(5, 5, 5, 3))
    a6 = rng.normal(size=(6, 6)) + 6.0 * np.eye(6)
    b6 = rng.normal(size=(6, 2))
    pts = rng.normal(size=(5, 3))
    vol = rng.uniform(size=(6, 6, 6))
    sample_pts = rng.uniform(1.2, 3.8, size=(8, 3))
    sample_pts = np.floor(sample_pts) + np.clip(sample_pts - np.floor(sample_pts), 0.1, 0.9)
    distinct = rng.permutation(2 * 6 * 6 * 6).reshape(2, 6, 6, 6) / 10.0
    weights = rng.normal(size=(2, 5, 5, 5))
    scale, shift = rng.normal(size=2), rng.normal(size=2)

    programs = {
        "conv3d_input": (lambda t: (ad.conv3d(t, w, padding=1) ** 2).sum(), x4),
        "conv3d_kernel": (lambda t: (ad.conv3d(x4, t, padding=1) ** 2).sum(), w),
        "instance_norm": (lambda t: (ad.instance_norm(t, scale, shift) * weights).sum(), x4),
        "relu": (lambda t: (ad.relu(t) * weights).sum(), _away_from_zero(rng, x4.shape)),
        "leaky_relu": (lambda t: (ad.leaky_relu(t, 0.2) * weights).sum(), _away_from_zero(rng, x4.shape)),
        "max_pool3d": (lambda t: (ad.max_pool3d(t) ** 2).sum(), distinct),
        "softmax_com": (lambda t: (ad.expected_coordinates(ad.spatial_softmax(t), coords) ** 2).sum(), x4),
        "solve_matrix": (lambda t: (ad.solve(t, b6) ** 2).sum(), a6),
        "solve_rhs": (lambda t: (ad.solve(a6, t) ** 2).sum(), b6),
        "sqdist": (lambda t: ad.sqdist(t, pts[:3]).sum(), pts),
        "tps_kernel": (lambda t: ad.tps_kernel(ad.sqdist(t, pts[:3] + 0.5)).sum(), pts),
        "sample_trilinear": (lambda t: (ad.sample_trilinear(vol, t) ** 2).sum(), sample_pts),
        "norm": (lambda t: ad.norm(t, axis=1).sum(), pts),
        "matmul": (lambda t: ((t @ pts.T) ** 2).sum(), pts),
    }
    return [_check("autodiff", name, grad_check(f, x), GRAD_TOL) for name, (f, x) in programs.items()]


def total_loss_suite(seed: int = 0) -> List[CheckResult]:
    """Finite differences through detector, CoM, both fits and every loss term"""
    spec = PhantomSpec(grid_size=8, landmarks=4, margin=3, min_separation=0.0, shells=1, blob_sigma=0.8,
                       jitter_mm=0.3, control_grid=2, seed=seed)
    template, gt = make_template(spec)
    subjects = [make_subject(template, gt, spec, seed + k)[0] for k in (1, 2)]
    cfg = DetectorConfig(blocks=[BlockSpec(channels=3, pool=True)], landmarks=4, input_shape=(8, 8, 8))
    params = init_params(cfg, seed)
    lam = 0.5

    def program(kernel: Tensor) -> Tensor:
        p = params.replace("head.conv", kernel)
        samples = []
        for vol in subjects:
            pred = predict(p, vol)
            samples.append(SubjectSample(
                pre_rc=vol, detector_input=vol, predicted=pred,
                forward=fit_tps(pred, gt.points, lam), reverse=fit_tps(gt.points, pred, lam),
            ))
        return total_loss(StepBatch(subjects=samples, template=template, template_landmarks=gt), 0.5)

    error = grad_check(program, params["head.conv"].values, eps=1e-7)
    return [_check("autodiff", "total_loss_detector", error, GRAD_TOL)]


# TPS

def tps_suite(seed: int = 0, configurations: int = 100) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    interp, constraints = 0.0, 0.0
    for _ in range(configurations):
        src, dst = rng.uniform(0, 32, size=(8, 3)), rng.uniform(0, 32, size=(8, 3))
        t = fit_tps(src, dst, 0.0)
        interp = max(interp, float(np.max(np.linalg.norm(eval_tps(t, src) - dst, axis=1))))
        constraints = max(constraints, *constraint_residuals(t))

    src, dst = rng.uniform(0, 32, size=(8, 3)), rng.uniform(0, 32, size=(8, 3))
    affine = fit_affine(src, dst)
    # lambda relative to the largest kernel entry, which is ~1e7 over a 32 mm extent
    limit = fit_tps(src, dst, 1e6 * float(np.abs(kernel_matrix(src, src).values).max()))
    probe = np.vstack([src, rng.uniform(0, 32, size=(8, 3))])
    expected = np.hstack([probe, np.ones((probe.shape[0], 1))]) @ affine
    affine_gap = float(np.max(np.abs(eval_tps(limit, probe) - expected))) / 32.0

    energies = [bending_energy(fit_tps(src, dst, lam)) for lam in (1e-3, 1e-1, 1.0, 10.0)]
    increases = max(0.0, max(b - a for a, b in zip(energies, energies[1:])))

    return [
        _check("tps", "interpolation_residual", interp, 1e-6),
        _check("tps", "constraint_residual", constraints, 1e-8),
        _check("tps", "affine_limit", affine_gap, 1e-3),
        _check("tps", "bending_energy_monotone", increases, 1e-12 * max(1.0, energies[0])),
    ]


# LOSSES

def loss_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        _check("losses", "alpha_0", abs(alpha(0.0)), 0.0),
        _check("losses", "alpha_0.5", abs(alpha(0.5) - 0.848284), 1e-6),
        _check("losses", "alpha_1", abs(alpha(1.0) - 0.986614), 1e-6),
        _check("losses", "total_mix", abs(mix(Tensor(2.0), Tensor(4.0), 0.5).item() - 3.696568), 1e-6),
    ]

    template_points = rng.uniform(4, 12, size=(5, 3))
    t1, t2 = consistency_from_warped([Tensor(template_points), Tensor(template_points + [1.0, 0.0, 0.0])], template_points)
    results.append(_check("losses", "consistency_hand_value", abs(t1.item() + t2.item() - 1.5), 1e-12))

    warped = [rng.normal(size=(5, 3)) for _ in range(4)]
    t1, t2 = consistency_from_warped([Tensor(w) for w in warped], template_points)
    pair_terms = []
    for r, j in itertools.combinations(range(4), 2):
        pair_terms.append(sum(math.dist(warped[r][l], warped[j][l]) for l in range(5)) / 5)
    naive1 = sum(pair_terms) / len(pair_terms)
    naive2 = sum(sum(math.dist(w[l], template_points[l]) for l in range(5)) / 5 for w in warped) / 4
    results.append(_check("losses", "consistency_naive", abs(t1.item() - naive1) + abs(t2.item() - naive2), 1e-12))

    spec = PhantomSpec(grid_size=12, landmarks=6, margin=3, min_separation=2.0, shells=1, seed=seed)
    template, gt = make_template(spec)
    shifted = template.with_data(template.data + 0.1)
    identity = fit_tps(gt.points, gt.points, 0.0)
    sample = SubjectSample(pre_rc=shifted, detector_input=shifted, predicted=Tensor(gt.points),
                           forward=identity, reverse=identity)
    batch = StepBatch(subjects=[sample, sample], template=template, template_landmarks=gt)
    results.append(_check("losses", "registration_constant_offset", abs(registration_loss(batch).item() - 0.01), 1e-9))
    return results


# METRICS

def metric_suite(seed: int = 0) -> List[CheckResult]:
    origin = LandmarkSet(points=[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    moved = LandmarkSet(points=[[3.0, 4.0, 0.0], [12.0, 0.0, 0.0]])
    mean, std = mre([moved], [origin])
    return [
        _check("metrics", "mre_345", abs(mean - 3.5) + abs(std - 1.5), 1e-12),
        _check("metrics", "sdr_half", abs(sdr([moved], [origin], 3.0) - 50.0), 0.0),
        _check("metrics", "sdr_strict", abs(sdr([moved], [origin], 5.0) - 50.0), 0.0),
    ]


SUITES: List[Callable[[int], List[CheckResult]]] = [gradient_suite, total_loss_suite, tps_suite, loss_suite, metric_suite]


def run_selfcheck(seed: int = 0) -> List[CheckResult]:
    results: List[CheckResult] = []
    for suite in SUITES:
        batch = suite(seed)
        logger.info("suite=%s checks=%d failed=%d", suite.__name__, len(batch), sum(not r.passed for r in batch))
        results.extend(batch)
    return results
