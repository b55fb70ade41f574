import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from src.landmarks.phantom import make_subject, make_template
from src.landmarks.trainer import TrainingPool
from src.landmarks.types import AffineRanges, BlockSpec, DetectorConfig, PhantomSpec, RcConfig, TrainConfig

settings.register_profile("ci", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_spec():
    return PhantomSpec(grid_size=12, landmarks=6, margin=3, min_separation=2.0, shells=1,
                       jitter_mm=0.5, control_grid=2, seed=0)


@pytest.fixture
def small_phantom(small_spec):
    return make_template(small_spec)


@pytest.fixture
def small_subjects(small_spec, small_phantom):
    template, gt = small_phantom
    return [make_subject(template, gt, small_spec, seed) for seed in (1, 2, 3, 4)]


@pytest.fixture
def tiny_detector():
    return DetectorConfig(blocks=[BlockSpec(channels=2, pool=True)], landmarks=6, input_shape=(12, 12, 12))


@pytest.fixture
def tiny_train_config(tiny_detector):
    return TrainConfig(
        M=2,
        epochs=2,
        lr_init=1e-3,
        lr_min=1e-5,
        detector=tiny_detector,
        affine=AffineRanges(rotation_deg=(-5, 5), translation_vox=(-1, 1), scale=(0.95, 1.05), shear=(-0.01, 0.01)),
        rc=RcConfig(layers=2),
        lambda_range=(0.1, 1.0),
    )


@pytest.fixture
def tiny_pool(small_phantom, small_subjects):
    template, gt = small_phantom
    return TrainingPool(
        template=template,
        template_landmarks=gt,
        subjects=[v for v, _ in small_subjects],
        ground_truth=[lm for _, lm in small_subjects],
    )
