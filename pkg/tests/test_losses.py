import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.landmarks.augment import rc_augment
from src.landmarks.autodiff import Tensor
from src.landmarks.errors import DataError
from src.landmarks.losses import (
    alpha,
    consistency_from_warped,
    consistency_loss,
    loss_components,
    mix,
    registration_loss,
    supervised_loss,
    total_loss,
)
from src.landmarks.tps import eval_tps, fit_tps
from src.landmarks.types import LandmarkSet, RcConfig, StepBatch, SubjectSample
from src.landmarks.volume import sample_trilinear


def _batch(template, gt, subjects, lam=0.5):
    samples = []
    for vol, lm in subjects:
        samples.append(SubjectSample(
            pre_rc=vol, detector_input=vol, predicted=Tensor(lm.points),
            forward=fit_tps(lm.points, gt.points, lam), reverse=fit_tps(gt.points, lm.points, lam),
        ))
    return StepBatch(subjects=samples, template=template, template_landmarks=gt)


def test_alpha_values():
    assert alpha(0.0) == 0.0
    assert alpha(0.5) == pytest.approx(0.848284, abs=1e-6)
    assert alpha(1.0) == pytest.approx(0.986614, abs=1e-6)
    with pytest.raises(ValueError):
        alpha(1.5)


@given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0))
def test_alpha_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert alpha(lo) <= alpha(hi)


def test_mix_hand_value():
    assert mix(Tensor(2.0), Tensor(4.0), 0.5).item() == pytest.approx(3.696568, abs=1e-6)


def test_consistency_hand_value():
    p = np.random.default_rng(0).uniform(size=(5, 3))
    t1, t2 = consistency_from_warped([Tensor(p), Tensor(p + [1.0, 0.0, 0.0])], p)
    assert t1.item() == pytest.approx(1.0)
    assert t2.item() == pytest.approx(0.5)


def test_consistency_matches_naive_loops():
    rng = np.random.default_rng(1)
    template = rng.normal(size=(4, 3))
    warped = [rng.normal(size=(4, 3)) for _ in range(3)]
    t1, t2 = consistency_from_warped([Tensor(w) for w in warped], template)
    pairs = [np.mean([math.dist(warped[r][l], warped[j][l]) for l in range(4)])
             for r, j in itertools.combinations(range(3), 2)]
    assert t1.item() == pytest.approx(np.mean(pairs), abs=1e-12)
    assert t2.item() == pytest.approx(np.mean([np.mean([math.dist(w[l], template[l]) for l in range(4)])
                                               for w in warped]), abs=1e-12)


def test_consistency_needs_two_matching_sets():
    p = np.zeros((3, 3))
    with pytest.raises(DataError):
        consistency_from_warped([Tensor(p)], p)
    with pytest.raises(DataError):
        consistency_from_warped([Tensor(p), Tensor(np.zeros((2, 3)))], p)


def test_registration_is_zero_for_the_template_itself(small_phantom):
    template, gt = small_phantom
    batch = _batch(template, gt, [(template, gt), (template, gt)], lam=0.0)
    assert registration_loss(batch).item() == pytest.approx(0.0, abs=1e-16)
    assert consistency_loss(batch).item() == pytest.approx(0.0, abs=1e-9)


def test_registration_constant_offset(small_phantom):
    template, gt = small_phantom
    shifted = template.with_data(template.data + 0.1)
    batch = _batch(template, gt, [(shifted, gt), (shifted, gt)], lam=0.0)
    assert registration_loss(batch).item() == pytest.approx(0.01, abs=1e-9)


def test_components_by_objective(small_phantom, small_subjects):
    template, gt = small_phantom
    batch = _batch(template, gt, small_subjects[:2])
    curriculum = loss_components(batch, 0.0)
    assert curriculum["total"].item() == pytest.approx(curriculum["reg"].item())
    late = loss_components(batch, 1.0)
    a = alpha(1.0)
    expected = (1 - a) * late["reg"].item() + a * (late["cons1"].item() + late["cons2"].item())
    assert late["total"].item() == pytest.approx(expected)
    assert total_loss(batch, 1.0).item() == pytest.approx(expected)
    registration = loss_components(batch, 1.0, "registration_only")
    assert registration["total"].item() == pytest.approx(registration["reg"].item())
    assert registration["cons1"].item() == 0.0


def test_supervised_loss():
    gt = LandmarkSet(points=np.zeros((2, 3)))
    pred = Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]))
    assert supervised_loss([pred], [gt]).item() == pytest.approx(5.0 / 6.0)
    with pytest.raises(DataError):
        supervised_loss([pred, pred], [gt])


def test_registration_matches_per_voxel_loop(small_phantom, small_subjects):
    template, gt = small_phantom
    batch = _batch(template, gt, small_subjects[:2])
    per_subject = []
    for sample in batch.subjects:
        squared = []
        for idx in np.ndindex(*template.shape):
            mapped = eval_tps(sample.reverse, template.index_to_world(idx))
            squared.append((sample_trilinear(sample.pre_rc, mapped) - template.data[idx]) ** 2)
        per_subject.append(np.mean(squared))
    assert registration_loss(batch).item() == pytest.approx(np.mean(per_subject), rel=1e-9, abs=1e-15)


def test_consistency_ignores_subject_order(small_phantom, small_subjects):
    template, gt = small_phantom
    subjects = small_subjects[:3]
    forward = consistency_loss(_batch(template, gt, subjects)).item()
    shuffled = consistency_loss(_batch(template, gt, [subjects[2], subjects[0], subjects[1]])).item()
    assert shuffled == pytest.approx(forward, rel=1e-12)


def test_registration_ignores_detector_contrast(small_phantom, small_subjects):
    template, gt = small_phantom
    batch = _batch(template, gt, small_subjects[:2])
    recoloured = StepBatch(
        subjects=[s.model_copy(update={"detector_input": rc_augment(s.pre_rc, RcConfig(), seed=i)})
                  for i, s in enumerate(batch.subjects)],
        template=template,
        template_landmarks=gt,
    )
    assert registration_loss(recoloured).item() == registration_loss(batch).item()
