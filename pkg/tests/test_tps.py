import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.landmarks import autodiff as ad
from src.landmarks.errors import DataError, SingularSystemError
from src.landmarks.tps import (
    bending_energy,
    constraint_residuals,
    dense_field,
    eval_tps,
    eval_tps_tensor,
    fit_affine,
    fit_tps,
    identity_transform,
    kernel_matrix,
    kernel_phi,
    load_transform,
    save_transform,
    warp_volume,
)
from src.landmarks.types import Volume3D
from src.landmarks.volume import resample_by_field, sample_trilinear


def _points(seed, n=8, size=32.0):
    return np.random.default_rng(seed).uniform(0, size, size=(n, 3))


def test_kernel_phi():
    assert kernel_phi(0.0) == 0.0
    assert kernel_phi(1.0) == 0.0
    assert kernel_phi(np.e) == pytest.approx(np.e ** 2)
    with pytest.raises(DataError):
        kernel_phi(-1.0)


@pytest.mark.parametrize("kernel", ["distance", "squared_distance"])
def test_interpolates_at_zero_lambda(kernel):
    src, dst = _points(0), _points(1)
    t = fit_tps(src, dst, 0.0, kernel)
    assert np.max(np.abs(eval_tps(t, src) - dst)) < 1e-6


def test_side_conditions_hold():
    t = fit_tps(_points(2), _points(3), 0.5)
    sum_residual, moment_residual = constraint_residuals(t)
    assert sum_residual < 1e-8
    assert moment_residual < 1e-8


def test_identity_fit_is_identity_everywhere():
    src = _points(4)
    t = identity_transform(src)
    probe = _points(5, n=20)
    assert np.allclose(eval_tps(t, probe), probe, atol=1e-8)


def test_affine_targets_are_reproduced_exactly():
    src = _points(6)
    a = np.array([[1.1, 0.1, 0.0], [0.0, 0.9, 0.2], [0.05, 0.0, 1.0]])
    dst = src @ a.T + np.array([1.0, -2.0, 3.0])
    for lam in (0.0, 1.0, 100.0):
        t = fit_tps(src, dst, lam)
        assert np.allclose(t.V.values, 0.0, atol=1e-8)
        probe = _points(7, n=5)
        assert np.allclose(eval_tps(t, probe), probe @ a.T + np.array([1.0, -2.0, 3.0]), atol=1e-6)


def test_large_lambda_approaches_least_squares_affine():
    src, dst = _points(8), _points(9)
    coef = fit_affine(src, dst)
    # kernel entries reach ~1e7 at this scale, so lambda is taken relative to them
    t = fit_tps(src, dst, 1e6 * np.abs(kernel_matrix(src, src).values).max())
    expected = np.hstack([src, np.ones((8, 1))]) @ coef
    assert np.max(np.abs(eval_tps(t, src) - expected)) / 32.0 < 1e-3


@pytest.mark.parametrize("kernel", ["distance", "squared_distance"])
def test_bending_energy_nonincreasing_in_lambda(kernel):
    src, dst = _points(10), _points(11)
    energies = [bending_energy(fit_tps(src, dst, lam, kernel)) for lam in (1e-3, 1e-1, 1.0, 10.0)]
    for a, b in zip(energies, energies[1:]):
        assert b <= a + 1e-12 * max(1.0, energies[0])


def test_validation_errors():
    src = _points(12)
    with pytest.raises(DataError, match="count mismatch"):
        fit_tps(src, src[:-1], 0.0)
    with pytest.raises(DataError):
        fit_tps(src[:3], src[:3], 0.0)
    with pytest.raises(DataError):
        fit_tps(src, src, -1.0)


def test_coincident_points_are_singular():
    with pytest.raises(SingularSystemError):
        fit_tps(np.ones((5, 3)), _points(13, n=5), 0.0)


def test_coplanar_points_are_singular():
    src = _points(14)
    src[:, 2] = 1.0
    with pytest.raises(SingularSystemError):
        fit_tps(src, _points(15), 0.0)


def test_gradient_flows_to_source_and_target():
    src, dst = _points(16), _points(17)
    probe = _points(18, n=4)
    assert ad.grad_check(lambda s: (eval_tps_tensor(fit_tps(s, dst, 0.3), probe) ** 2).sum(), src) < 1e-4
    assert ad.grad_check(lambda d: (eval_tps_tensor(fit_tps(src, d, 0.3), probe) ** 2).sum(), dst) < 1e-4


def test_warp_with_identity_leaves_volume_unchanged():
    data = np.random.default_rng(19).uniform(size=(6, 6, 6))
    v = Volume3D(data=data)
    ctrl = np.array([[0, 0, 0], [5, 0, 0], [0, 5, 0], [0, 0, 5], [5, 5, 5]], dtype=float)
    t = identity_transform(ctrl)
    assert np.allclose(dense_field(t, v), v.world_grid(), atol=1e-9)
    assert np.allclose(warp_volume(v, t).data, data, atol=1e-8)


def test_transform_json_round_trip(tmp_path):
    t = fit_tps(_points(20), _points(21), 0.1)
    save_transform(t, tmp_path / "tps.json")
    loaded = load_transform(tmp_path / "tps.json")
    probe = _points(22, n=6)
    assert np.allclose(eval_tps(loaded, probe), eval_tps(t, probe))
    assert loaded.lam == t.lam


@given(st.floats(min_value=0.0, max_value=5.0), st.integers(min_value=0, max_value=10_000))
def test_translation_is_exact_for_any_lambda(lam, seed):
    src = _points(seed)
    shift = np.array([3.0, -1.0, 2.0])
    t = fit_tps(src, src + shift, lam)
    assert np.allclose(eval_tps(t, src), src + shift, atol=1e-6)


def _phi(s):
    return np.where(s > 0, s * s * np.log(np.where(s > 0, s, 1.0)), 0.0)


def test_matches_block_system_in_millimetres():
    src, dst = _points(23), _points(24)
    lam = 0.25
    n = src.shape[0]
    sq = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    r = np.hstack([src, np.ones((n, 1))])
    system = np.block([[_phi(sq) + lam * np.eye(n), r], [r.T, np.zeros((4, 4))]])
    solution = np.linalg.solve(system, np.vstack([dst, np.zeros((4, 3))]))
    v, w = solution[:n], solution[n:]

    probe = _points(25, n=10)
    probe_sq = ((probe[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    expected = _phi(probe_sq) @ v + np.hstack([probe, np.ones((10, 1))]) @ w
    t = fit_tps(src, dst, lam)
    assert np.max(np.abs(eval_tps(t, probe) - expected)) / 32.0 < 1e-6


def test_saved_coefficients_evaluate_by_hand(tmp_path):
    src, dst = _points(26), _points(27)
    save_transform(fit_tps(src, dst, 0.0), tmp_path / "tps.json")
    saved = json.loads((tmp_path / "tps.json").read_text())
    w, v = np.asarray(saved["W"]), np.asarray(saved["V"])
    ctrl = np.asarray(saved["source_points"])
    assert saved["kernel"] == "squared_distance"
    assert np.array_equal(ctrl, src)

    sq = ((src[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    by_hand = np.hstack([src, np.ones((src.shape[0], 1))]) @ w + _phi(sq) @ v
    assert np.max(np.linalg.norm(by_hand - dst, axis=1)) < 1e-6


def _rotation(a, b, c):
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


@pytest.mark.parametrize("kernel", ["distance", "squared_distance"])
def test_fit_commutes_with_rigid_motion(kernel):
    src, dst = _points(28), _points(29)
    rot, shift = _rotation(0.3, -0.7, 1.1), np.array([4.0, -6.0, 2.5])
    probe = _points(30, n=6)

    t = fit_tps(src, dst, 0.5, kernel)
    moved = fit_tps(src @ rot.T + shift, dst @ rot.T + shift, 0.5, kernel)
    assert np.allclose(eval_tps(moved, probe @ rot.T + shift), eval_tps(t, probe) @ rot.T + shift, atol=1e-5)


def test_dense_field_and_resampling_match_pointwise_evaluation():
    src = _points(31, size=7.0)
    t = fit_tps(src, src + np.random.default_rng(32).normal(scale=0.4, size=src.shape), 0.1)
    v = Volume3D(data=np.random.default_rng(33).uniform(size=(5, 6, 7)), spacing=(1.0, 1.5, 0.8), origin=(-1.0, 0.0, 0.5))

    field = dense_field(t, v)
    warped = resample_by_field(v, field)
    for idx in np.ndindex(*v.shape):
        world = v.index_to_world(idx)
        mapped = eval_tps(t, world)
        assert np.allclose(field[idx], mapped, atol=1e-9)
        assert warped.data[idx] == pytest.approx(sample_trilinear(v, mapped), abs=1e-9)
    assert np.allclose(warp_volume(v, t).data, warped.data, atol=1e-9)
