"""Training objectives: registration similarity, landmark consistency and their curriculum mix."""
from __future__ import annotations

import itertools
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError
from .tps import dense_field_tensor, eval_tps_tensor
from .types import LandmarkSet, StepBatch, SubjectSample, Volume3D


def alpha(eta: float) -> float:
    """Sigmoid ramp 2 / (1 + exp(-5 eta)) - 1 on eta in [0, 1]"""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"training progress eta must lie in [0, 1], got {eta}")
    return 2.0 / (1.0 + math.exp(-5.0 * eta)) - 1.0


# REGISTRATION

def warped_to_template(subject: SubjectSample, template: Volume3D) -> Tensor:
    """Pre-RC subject volume pulled onto the template grid through the reverse fit, flattened"""
    field = dense_field_tensor(subject.reverse, template)
    return ad.sample_trilinear(subject.pre_rc.data, field, subject.pre_rc.origin, subject.pre_rc.spacing)


def mse(a: Tensor, b: np.ndarray) -> Tensor:
    diff = a - b
    return (diff * diff).mean()


def registration_loss(batch: StepBatch) -> Tensor:
    """Mean over subjects of the MSE between the warped pre-RC volume and the template"""
    target = batch.template.data.reshape(-1)
    terms = []
    for subject in batch.subjects:
        warped = warped_to_template(subject, batch.template)
        if warped.shape != target.shape:
            raise ShapeError(f"warped subject has {warped.shape[0]} voxels, template {target.shape[0]}")
        terms.append(mse(warped, target))
    return _average(terms)


# CONSISTENCY

def _average(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def mean_distance(a: Tensor, b) -> Tensor:
    """Mean over landmarks of the Euclidean distance between two (L, 3) sets"""
    return ad.norm(a - b, axis=1).mean()


def consistency_from_warped(warped: Sequence[Tensor], template_points: np.ndarray) -> Tuple[Tensor, Tensor]:
    """(cross-subject term, subject-template term) from predictions already mapped to template space"""
    if len(warped) < 2:
        raise DataError("consistency needs at least two subjects")
    template_points = np.asarray(template_points, dtype=np.float64)
    for w in warped:
        if w.shape != template_points.shape:
            raise DataError(f"landmark count mismatch: {w.shape} vs template {template_points.shape}")
    pairs = [mean_distance(warped[r], warped[j]) for r, j in itertools.combinations(range(len(warped)), 2)]
    to_template = [mean_distance(w, template_points) for w in warped]
    return _average(pairs), _average(to_template)


def warped_predictions(batch: StepBatch) -> List[Tensor]:
    return [eval_tps_tensor(s.forward, s.predicted) for s in batch.subjects]


def consistency_terms(batch: StepBatch) -> Tuple[Tensor, Tensor]:
    return consistency_from_warped(warped_predictions(batch), batch.template_landmarks.points)


def consistency_loss(batch: StepBatch) -> Tensor:
    term1, term2 = consistency_terms(batch)
    return term1 + term2


# TOTAL

def mix(registration: Tensor, consistency: Tensor, eta: float) -> Tensor:
    a = alpha(eta)
    return registration * (1.0 - a) + consistency * a


def total_loss(batch: StepBatch, eta: float) -> Tensor:
    return mix(registration_loss(batch), consistency_loss(batch), eta)


def loss_components(batch: StepBatch, eta: float, objective: str = "curriculum") -> Dict[str, Tensor]:
    """Every logged term plus the optimised ``total`` for the given objective"""
    reg = registration_loss(batch)
    if objective == "registration_only":
        zero = Tensor(0.0)
        return {"reg": reg, "cons1": zero, "cons2": zero, "total": reg}
    term1, term2 = consistency_terms(batch)
    return {"reg": reg, "cons1": term1, "cons2": term2, "total": mix(reg, term1 + term2, eta)}


def supervised_loss(predicted: Sequence[Tensor], ground_truth: Sequence[LandmarkSet]) -> Tensor:
    """Mean squared coordinate error against known landmarks"""
    if len(predicted) != len(ground_truth):
        raise DataError(f"{len(predicted)} predictions vs {len(ground_truth)} ground-truth sets")
    return _average([mse(p, gt.points) for p, gt in zip(predicted, ground_truth)])
