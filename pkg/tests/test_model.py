import numpy as np
import pytest
from pydantic import ValidationError

from src.landmarks import autodiff as ad
from src.landmarks.errors import ShapeError
from src.landmarks.model import com_head, detector_forward, init_params, param_shapes, predict, working_grid
from src.landmarks.types import BlockSpec, DetectorConfig, Volume3D


def test_param_layout(tiny_detector):
    shapes = param_shapes(tiny_detector)
    assert shapes == {
        "block0.conv": (2, 1, 3, 3, 3),
        "block0.norm_scale": (2,),
        "block0.norm_shift": (2,),
        "head.conv": (6, 2, 1, 1, 1),
    }


def test_init_is_seeded(tiny_detector):
    a, b = init_params(tiny_detector, 3), init_params(tiny_detector, 3)
    c = init_params(tiny_detector, 4)
    assert all(np.array_equal(a[n].values, b[n].values) for n in a.names())
    assert not np.array_equal(a["block0.conv"].values, c["block0.conv"].values)
    assert np.array_equal(a["block0.norm_scale"].values, np.ones(2))


def test_presets():
    desk = DetectorConfig.desk()
    assert desk.pool_count() == 3
    assert desk.working_shape() == (4, 4, 4)
    full = DetectorConfig.full_scale()
    assert [b.channels for b in full.blocks] == [32, 64, 128, 256, 512, 256, 128, 64, 32]
    assert full.pool_count() == 4


def test_config_rejects_over_pooling():
    with pytest.raises(ValidationError):
        DetectorConfig(blocks=[BlockSpec(channels=2, pool=True)] * 3, input_shape=(4, 4, 4))
    with pytest.raises(ValidationError):
        DetectorConfig(kernel_size=2)


def test_forward_shape(tiny_detector):
    params = init_params(tiny_detector, 0)
    x = np.random.default_rng(0).uniform(size=(12, 12, 12))
    assert detector_forward(params, x).shape == (6, 6, 6, 6)


def test_forward_rejects_wrong_input(tiny_detector):
    params = init_params(tiny_detector, 0)
    with pytest.raises(ShapeError):
        detector_forward(params, np.zeros((10, 12, 12)))


def test_working_grid_centres_pooled_cells():
    geom = Volume3D(data=np.zeros((8, 8, 8)), spacing=(1.0, 2.0, 1.0), origin=(1.0, 0.0, 0.0))
    grid = working_grid(geom, 1, (4, 4, 4))
    assert np.allclose(grid[0, 0, 0], [1.5, 1.0, 0.5])
    assert np.allclose(grid[1, 0, 0] - grid[0, 0, 0], [2.0, 0.0, 0.0])


def test_com_head_of_a_sharp_peak():
    geom = Volume3D(data=np.zeros((5, 5, 5)))
    h = np.full((1, 5, 5, 5), -50.0)
    h[0, 1, 3, 2] = 50.0
    assert np.allclose(com_head(ad.Tensor(h), geom).values, [[1.0, 3.0, 2.0]], atol=1e-6)


def test_com_head_of_a_uniform_map_is_the_centre():
    geom = Volume3D(data=np.zeros((4, 6, 5)), spacing=(1.0, 0.5, 2.0), origin=(-3.0, 1.0, 0.0))
    out = com_head(ad.Tensor(np.zeros((2, 4, 6, 5))), geom).values
    assert np.allclose(out, [geom.center()] * 2, atol=1e-12)


def test_com_head_of_two_equal_spikes_is_their_midpoint():
    geom = Volume3D(data=np.zeros((6, 6, 6)))
    h = np.full((1, 6, 6, 6), -60.0)
    h[0, 1, 1, 4] = h[0, 5, 3, 0] = 60.0
    assert np.allclose(com_head(ad.Tensor(h), geom).values, [[3.0, 2.0, 2.0]], atol=1e-9)


def test_com_head_shifts_one_spacing_per_voxel():
    geom = Volume3D(data=np.zeros((6, 6, 6)), spacing=(1.5, 1.0, 0.5))
    h = np.random.default_rng(3).normal(size=(1, 6, 6, 6))
    h[0, -1] = -1e3
    shifted = np.full_like(h, -1e3)
    shifted[0, 1:] = h[0, :-1]
    moved = com_head(ad.Tensor(shifted), geom).values - com_head(ad.Tensor(h), geom).values
    assert np.allclose(moved, [[1.5, 0.0, 0.0]], atol=1e-9)


def test_prediction_lies_inside_the_volume(tiny_detector):
    params = init_params(tiny_detector, 1)
    v = Volume3D(data=np.random.default_rng(1).uniform(size=(12, 12, 12)), origin=(5.0, 5.0, 5.0))
    pred = predict(params, v).values
    lo, hi = v.bounds()
    assert pred.shape == (6, 3)
    assert np.all(pred >= lo) and np.all(pred <= hi)


def test_prediction_gradient_matches_finite_differences(tiny_detector):
    params = init_params(tiny_detector, 2)
    v = Volume3D(data=np.random.default_rng(2).uniform(size=(12, 12, 12)))
    target = v.center()

    def program(kernel):
        p = params.replace("head.conv", kernel)
        return ((predict(p, v) - target) ** 2).sum()

    assert ad.grad_check(program, params["head.conv"].values, eps=1e-6) < 1e-4
