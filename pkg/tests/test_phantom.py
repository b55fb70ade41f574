import numpy as np
import pytest

from src.landmarks.errors import ConfigError, DataError
from src.landmarks.phantom import (
    invert_points,
    load_cohort,
    make_cohort,
    make_subject,
    make_template,
    random_deformation,
    read_manifest,
    regenerate_cohort,
)
from src.landmarks.tps import eval_tps, fit_tps
from src.landmarks.types import PhantomSpec
from src.landmarks.volume import load_volume, sample_trilinear


def test_template_is_reproducible(small_spec):
    (a, la), (b, lb) = make_template(small_spec), make_template(small_spec)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(la.points, lb.points)
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0


def test_landmarks_sit_on_blob_peaks(small_spec, small_phantom):
    template, gt = small_phantom
    idx = template.world_to_index(gt.points)
    assert np.all(idx >= small_spec.margin)
    assert np.all(idx <= small_spec.grid_size - 1 - small_spec.margin)
    values = sample_trilinear(template, gt.points)
    assert np.all(values > np.median(template.data))


def test_landmarks_respect_min_separation(small_spec, small_phantom):
    _, gt = small_phantom
    d = np.linalg.norm(gt.points[:, None] - gt.points[None], axis=-1)
    assert d[np.triu_indices(gt.count, 1)].min() >= small_spec.min_separation


def test_infeasible_sites():
    spec = PhantomSpec(grid_size=8, landmarks=20, margin=3, min_separation=3.0)
    with pytest.raises(ConfigError, match="infeasible"):
        make_template(spec)


def test_identity_subject_is_the_template(small_phantom):
    template, gt = small_phantom
    spec = PhantomSpec(grid_size=12, landmarks=6, margin=3, min_separation=2.0, shells=1, jitter_mm=0.0)
    volume, lm = make_subject(template, gt, spec, seed=3)
    assert np.array_equal(volume.data, template.data)
    assert np.array_equal(lm.points, gt.points)


def test_subject_landmarks_are_exact_images(small_spec, small_phantom):
    template, gt = small_phantom
    phi = random_deformation(small_spec, template, np.random.default_rng(5))
    _, lm = make_subject(template, gt, small_spec, seed=5, deformation=phi)
    assert np.array_equal(lm.points, eval_tps(phi, gt.points))


def test_known_translation_moves_landmarks(small_spec, small_phantom):
    template, gt = small_phantom
    ctrl = np.array([[0, 0, 0], [11, 0, 0], [0, 11, 0], [0, 0, 11], [11, 11, 11]], dtype=float)
    shift = fit_tps(ctrl, ctrl + [0.5, 0.0, 0.0], 0.0)
    _, lm = make_subject(template, gt, small_spec, seed=0, deformation=shift)
    assert np.allclose(lm.points, gt.points + [0.5, 0.0, 0.0], atol=1e-9)


def test_volume_moves_with_the_landmarks(small_spec, small_phantom):
    template, gt = small_phantom
    ctrl = np.array([[0, 0, 0], [11, 0, 0], [0, 11, 0], [0, 0, 11], [11, 11, 11]], dtype=float)
    shift = fit_tps(ctrl, ctrl + [1.0, 0.0, 0.0], 0.0)
    volume, lm = make_subject(template, gt, small_spec, seed=0, deformation=shift)
    assert np.allclose(volume.data[1:], template.data[:-1], atol=1e-6)
    assert np.allclose(sample_trilinear(volume, lm.points), sample_trilinear(template, gt.points), atol=1e-6)


def test_invert_points_round_trip(small_spec, small_phantom):
    template, _ = small_phantom
    phi = random_deformation(small_spec, template, np.random.default_rng(9))
    q = np.array([[4.0, 5.0, 6.0], [7.5, 3.5, 5.0]])
    assert np.allclose(invert_points(phi, eval_tps(phi, q)), q, atol=1e-9)


def test_cohort_files_and_regeneration(tmp_path, small_spec):
    manifest_path = make_cohort(small_spec, 4, tmp_path / "cohort", test_fraction=0.25)
    manifest = read_manifest(manifest_path)
    assert [s.id for s in manifest.subjects] == ["sub000", "sub001", "sub002", "sub003"]
    assert len(manifest.split("test")) == 1
    _, template, gt, subjects = load_cohort(manifest_path, "train")
    assert len(subjects) == 3
    assert template.shape == (12, 12, 12)

    regenerate_cohort(manifest_path, tmp_path / "again")
    for entry in manifest.subjects:
        a = load_volume(tmp_path / "cohort" / entry.volume)
        b = load_volume(tmp_path / "again" / entry.volume)
        assert np.array_equal(a.data, b.data)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path / "manifest.json")


def test_bad_test_fraction(tmp_path, small_spec):
    with pytest.raises(ConfigError):
        make_cohort(small_spec, 4, tmp_path, test_fraction=1.0)
