import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.landmarks import autodiff as ad
from src.landmarks.autodiff import Tensor, grad_check
from src.landmarks.errors import DataError, NonFiniteError, ShapeError, SingularSystemError

finite = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)


def test_broadcast_gradients_sum_over_expanded_axes():
    a = ad.parameter(np.arange(3.0).reshape(3, 1))
    b = ad.parameter(np.arange(4.0).reshape(1, 4))
    ad.backward((a * b).sum())
    assert np.allclose(a.grad, np.full((3, 1), 6.0))
    assert np.allclose(b.grad, np.full((1, 4), 3.0))


def test_shared_subexpression_accumulates():
    x = ad.parameter(2.0)
    y = x * x + x
    ad.backward(y)
    assert x.grad == pytest.approx(5.0)


def test_backward_rejects_non_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)


def test_backward_twice_resets_intermediate_grads():
    x = ad.parameter(np.ones(2))
    y = (x * 3.0).sum()
    ad.backward(y)
    ad.zero_grad([x])
    ad.backward(y)
    assert np.allclose(x.grad, 3.0)


def test_non_finite_value_raises():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_mismatched_shapes_raise():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@pytest.mark.parametrize(
    "name,f,shape",
    [
        ("exp", lambda t: ad.exp(t).sum(), (4,)),
        ("div", lambda t: (1.0 / (t * t + 1.0)).sum(), (5,)),
        ("power", lambda t: ((t * t + 1.0) ** 1.5).sum(), (3, 2)),
        ("transpose", lambda t: (t.T @ t).sum(), (3, 2)),
        ("getitem", lambda t: (t[1:, :2] ** 2).sum(), (3, 3)),
        ("concat", lambda t: (ad.concat([t, t * 2.0], axis=1) ** 2).sum(), (2, 2)),
        ("mean_axis", lambda t: (t.mean(axis=0) ** 2).sum(), (4, 3)),
        ("norm", lambda t: ad.norm(t + 3.0, axis=1).sum(), (4, 3)),
    ],
)
def test_elementary_gradients(name, f, shape):
    x = np.random.default_rng(1).normal(size=shape)
    assert grad_check(f, x) < 1e-6, name


def test_conv3d_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    assert grad_check(lambda t: (ad.conv3d(t, w, padding=1) ** 2).sum(), x) < 1e-5
    assert grad_check(lambda t: (ad.conv3d(x, t, padding=1) ** 2).sum(), w) < 1e-5


def test_conv3d_identity_kernel():
    x = np.random.default_rng(3).normal(size=(1, 4, 4, 4))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    assert np.allclose(ad.conv3d(x, w, padding=1).values, x)


def test_instance_norm_output_statistics():
    x = np.random.default_rng(4).normal(2.0, 3.0, size=(2, 5, 5, 5))
    out = ad.instance_norm(x, np.ones(2), np.zeros(2)).values
    assert np.allclose(out.mean(axis=(1, 2, 3)), 0.0, atol=1e-12)
    assert np.allclose(out.std(axis=(1, 2, 3)), 1.0, atol=1e-4)


def test_max_pool_crops_odd_sides():
    x = np.arange(5 * 4 * 3, dtype=float).reshape(1, 5, 4, 3)
    out = ad.max_pool3d(x)
    assert out.shape == (1, 2, 2, 1)
    assert out.values[0, 0, 0, 0] == x[0, :2, :2, :2].max()


def test_spatial_softmax_normalises_each_channel():
    x = np.random.default_rng(5).normal(size=(3, 4, 4, 4))
    p = ad.spatial_softmax(x).values
    assert np.allclose(p.reshape(3, -1).sum(axis=1), 1.0)


def test_expected_coordinates_of_a_peak():
    probs = np.zeros((1, 3, 3, 3))
    probs[0, 2, 1, 0] = 1.0
    axes = [np.arange(3.0)] * 3
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    assert np.allclose(ad.expected_coordinates(probs, coords).values, [[2.0, 1.0, 0.0]])


def test_solve_matches_numpy_and_gradients():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(5, 5)) + 5.0 * np.eye(5)
    b = rng.normal(size=(5, 2))
    assert np.allclose(ad.solve(a, b).values, np.linalg.solve(a, b))
    assert grad_check(lambda t: (ad.solve(t, b) ** 2).sum(), a) < 1e-5
    assert grad_check(lambda t: (ad.solve(a, t) ** 2).sum(), b) < 1e-5


def test_solve_badly_scaled_but_regular_system():
    a = np.diag([1e-8, 1.0, 1e8])
    b = np.ones(3)
    assert np.allclose(ad.solve(a, b).values, [1e8, 1.0, 1e-8])


def test_solve_singular_raises():
    with pytest.raises(SingularSystemError):
        ad.solve(np.ones((3, 3)), np.ones(3))


@pytest.mark.parametrize("gap,singular", [(1e-6, False), (1e-14, True)])
def test_solve_guard_agrees_with_condition_estimate(gap, singular):
    a = np.array([[1.0, 1.0], [1.0, 1.0 + gap]])
    cond = ad.condition_estimate(a)
    assert (cond > ad.CONDITION_LIMIT) == singular
    if singular:
        with pytest.raises(SingularSystemError, match=re.escape(f"{cond:.3e}")):
            ad.solve(a, np.ones(2))
    else:
        assert np.allclose(ad.solve(a, np.ones(2)).values, np.linalg.solve(a, np.ones(2)))


def test_tps_kernel_values_and_zero_limit():
    sq = np.array([0.0, 1.0, np.e ** 2])
    assert np.allclose(ad.tps_kernel(sq, "distance").values, [0.0, 0.0, np.e ** 2])
    assert np.allclose(ad.tps_kernel(sq, "squared_distance").values, [0.0, 0.0, 2.0 * np.e ** 4])
    with pytest.raises(DataError):
        ad.tps_kernel(np.array([-1.0]))


def test_tps_kernel_gradient_is_finite_at_coincident_points():
    pts = ad.parameter(np.random.default_rng(7).normal(size=(4, 3)))
    ad.backward(ad.tps_kernel(ad.sqdist(pts, pts)).sum())
    assert np.all(np.isfinite(pts.grad))


def test_sample_trilinear_zero_padding_and_gradient():
    data = np.random.default_rng(8).uniform(size=(4, 4, 4))
    outside = ad.sample_trilinear(data, np.array([[-5.0, 0.0, 0.0], [10.0, 10.0, 10.0]]))
    assert np.allclose(outside.values, 0.0)
    pts = np.array([[1.3, 1.6, 2.2], [0.4, 2.7, 1.1]])
    assert grad_check(lambda t: (ad.sample_trilinear(data, t) ** 2).sum(), pts) < 1e-5


@given(arrays(np.float64, (3, 4), elements=finite))
def test_sum_gradient_is_ones(values):
    x = ad.parameter(values)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


@given(arrays(np.float64, (6,), elements=finite), st.floats(min_value=0.0, max_value=1.0))
def test_leaky_relu_matches_definition(values, slope):
    out = ad.leaky_relu(values, slope).values
    assert np.allclose(out, np.where(values > 0, values, slope * values))
