"""Synthetic phantoms with landmarks known exactly by construction.

A template is a few smoothed ellipsoid shells plus one analytic Gaussian blob
per landmark site. A subject deformation maps template coordinates to subject
coordinates: subject landmarks are the deformation applied to the template
landmarks, never re-detected from voxels, and the subject volume samples the
template through the inverse deformation.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .augment import rc_augment
from .errors import ConfigError, DataError, NumericalError
from .tps import eval_tps, fit_tps
from .types import CohortEntry, CohortManifest, LandmarkSet, PhantomSpec, RcConfig, TpsTransform, Volume3D
from .volume import load_landmarks, load_volume, resample_by_field, rescale_unit, save_landmarks, save_volume

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAX_SITE_ATTEMPTS = 10000
MAX_DEFORM_ATTEMPTS = 20
INVERSE_TOL = 1e-10
INVERSE_MAX_ITER = 200


def quantize(data: np.ndarray) -> np.ndarray:
    """Round to float32 so files round-trip bit-exactly"""
    return np.asarray(data, dtype=np.float32).astype(np.float64)


def _geometry(spec: PhantomSpec) -> Volume3D:
    n = spec.grid_size
    return Volume3D(data=np.zeros((n, n, n)), spacing=(spec.spacing,) * 3)


# TEMPLATE

def sample_sites(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """(L, 3) voxel-index sites at least ``margin`` from the border and ``min_separation`` apart"""
    lo, hi = spec.margin, spec.grid_size - 1 - spec.margin
    sites: List[np.ndarray] = []
    for _ in range(MAX_SITE_ATTEMPTS):
        candidate = rng.uniform(lo, hi, size=3)
        if all(np.linalg.norm(candidate - s) >= spec.min_separation for s in sites):
            sites.append(candidate)
            if len(sites) == spec.landmarks:
                return np.array(sites)
    raise ConfigError(
        f"infeasible site placement: {spec.landmarks} sites with separation {spec.min_separation} "
        f"and margin {spec.margin} do not fit a {spec.grid_size}^3 grid"
    )


def blob_widths(spec: PhantomSpec) -> np.ndarray:
    """Per-landmark blob sigma in mm; widths differ so landmarks stay distinguishable"""
    ramp = np.linspace(0.0, 1.0, spec.landmarks) if spec.landmarks > 1 else np.zeros(1)
    return spec.blob_sigma * spec.spacing * (0.8 + 0.4 * ramp)


def blob_field(geometry: Volume3D, centers_mm: np.ndarray, widths_mm: np.ndarray, amplitude: float) -> np.ndarray:
    grid = geometry.world_grid()
    field = np.zeros(geometry.shape)
    for center, sigma in zip(centers_mm, widths_mm):
        sq = np.sum((grid - center) ** 2, axis=-1)
        field += amplitude * np.exp(-sq / (2.0 * sigma ** 2))
    return field


def shell_field(spec: PhantomSpec, geometry: Volume3D, rng: np.random.Generator) -> np.ndarray:
    grid = geometry.world_grid()
    center = geometry.center()
    half = (spec.grid_size - 1) / 2.0 * spec.spacing
    field = np.zeros(geometry.shape)
    for k in range(spec.shells):
        radii = half * (0.85 - 0.25 * k) * rng.uniform(0.85, 1.0, size=3)
        inside = np.sum(((grid - center) / radii) ** 2, axis=-1) <= 1.0
        field += 0.3 * inside
    return ndimage.gaussian_filter(field, sigma=1.0)


def make_template(spec: PhantomSpec) -> Tuple[Volume3D, LandmarkSet]:
    """Template volume in [0, 1] with one landmark at each blob center"""
    rng = np.random.default_rng(spec.seed)
    geometry = _geometry(spec)
    sites = sample_sites(spec, rng)
    centers = geometry.index_to_world(sites)
    data = shell_field(spec, geometry, rng) + blob_field(geometry, centers, blob_widths(spec), spec.blob_amplitude)
    return geometry.with_data(quantize(rescale_unit(data))), LandmarkSet(points=centers)


# SUBJECTS

def control_grid(geometry: Volume3D, per_axis: int) -> np.ndarray:
    axes = [np.linspace(0, s - 1, per_axis) for s in geometry.shape]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return geometry.index_to_world(idx)


def random_deformation(spec: PhantomSpec, geometry: Volume3D, rng: np.random.Generator) -> TpsTransform:
    """Interpolating TPS on a jittered control grid, mapping template coordinates to subject coordinates"""
    ctrl = control_grid(geometry, spec.control_grid)
    return fit_tps(ctrl, ctrl + rng.normal(0.0, spec.jitter_mm, size=ctrl.shape), 0.0)


def invert_points(deformation: TpsTransform, targets: np.ndarray) -> np.ndarray:
    """Points q with deformation(q) = targets, by fixed-point iteration"""
    q = np.array(targets, dtype=np.float64)
    for _ in range(INVERSE_MAX_ITER):
        residual = targets - eval_tps(deformation, q)
        if np.max(np.abs(residual)) < INVERSE_TOL:
            return q
        q = q + residual
    raise NumericalError(f"deformation inverse did not converge to {INVERSE_TOL:g} in {INVERSE_MAX_ITER} iterations")


def warp_to_subject(template: Volume3D, deformation: TpsTransform) -> Volume3D:
    """subject(u) = template(deformation^-1(u)) on the template grid"""
    grid = template.world_grid()
    preimages = invert_points(deformation, grid.reshape(-1, 3))
    return resample_by_field(template, preimages.reshape(grid.shape))


def _inside(points: np.ndarray, geometry: Volume3D, margin: float) -> bool:
    idx = geometry.world_to_index(points)
    return bool(np.all(idx >= margin) and np.all(idx <= np.asarray(geometry.shape) - 1 - margin))


def apply_contrast(v: Volume3D, spec: PhantomSpec, seed: int) -> Volume3D:
    """Intensity-only transform; never moves anatomy"""
    if spec.contrast == "gamma":
        return v.with_data(np.clip(v.data, 0.0, 1.0) ** spec.gamma)
    if spec.contrast == "rc":
        return rc_augment(v, RcConfig(), seed)
    return v


def make_subject(
    template: Volume3D,
    gt: LandmarkSet,
    spec: PhantomSpec,
    seed: int,
    deformation: Optional[TpsTransform] = None,
) -> Tuple[Volume3D, LandmarkSet]:
    """Deformed, contrast-shifted, noisy copy of the template with its exact landmarks"""
    rng = np.random.default_rng(seed)
    if deformation is None and spec.jitter_mm == 0:
        volume, points = template, gt.points.copy()
    else:
        for _ in range(MAX_DEFORM_ATTEMPTS):
            phi = deformation if deformation is not None else random_deformation(spec, template, rng)
            points = eval_tps(phi, gt.points)
            if _inside(points, template, 1.0):
                break
            if deformation is not None:
                raise DataError("deformation pushes a landmark out of the volume")
            logger.debug("resampling deformation: landmark left the volume")
        else:
            raise DataError(f"no in-bounds deformation after {MAX_DEFORM_ATTEMPTS} draws")
        volume = warp_to_subject(template, phi)

    volume = apply_contrast(volume, spec, seed + 1)
    data = volume.data
    if spec.noise_sigma > 0:
        data = np.clip(data + rng.normal(0.0, spec.noise_sigma, size=data.shape), 0.0, 1.0)
    return template.with_data(quantize(data)), LandmarkSet(points=points)


# COHORTS

def subject_seeds(spec: PhantomSpec, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(spec.seed).generate_state(n)]


def _split(spec: PhantomSpec, n: int, test_fraction: float) -> List[str]:
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n_test = int(round(n * test_fraction))
    if test_fraction > 0 and n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    held_out = set(np.random.default_rng(spec.seed).permutation(n)[:n_test].tolist())
    return ["test" if i in held_out else "train" for i in range(n)]


def _write_cohort(manifest: CohortManifest, out: Path) -> Path:
    template, gt = make_template(manifest.spec)
    save_volume(template, out / manifest.template_volume)
    save_landmarks(gt, out / manifest.template_landmarks)
    for entry in manifest.subjects:
        volume, landmarks = make_subject(template, gt, manifest.spec, entry.seed)
        save_volume(volume, out / entry.volume)
        save_landmarks(landmarks, out / entry.landmarks)
    path = out / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2))
    logger.info("cohort subjects=%d path=%s", len(manifest.subjects), path)
    return path


def make_cohort(spec: PhantomSpec, n: int, out_dir: PathLike, test_fraction: float = 0.25) -> Path:
    """Template plus ``n`` subjects on disk, described by ``manifest.json``"""
    if n < 1:
        raise ConfigError("a cohort needs at least one subject")
    splits = _split(spec, n, test_fraction)
    manifest = CohortManifest(
        spec=spec,
        template_volume="template",
        template_landmarks="template_landmarks.json",
        subjects=[
            CohortEntry(id=f"sub{i:03d}", seed=seed, split=splits[i], volume=f"subjects/sub{i:03d}",
                        landmarks=f"subjects/sub{i:03d}_landmarks.json")
            for i, seed in enumerate(subject_seeds(spec, n))
        ],
    )
    return _write_cohort(manifest, Path(out_dir))


def read_manifest(path: PathLike) -> CohortManifest:
    try:
        return CohortManifest.model_validate_json(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing cohort manifest {path}") from e
    except ValueError as e:
        raise DataError(f"malformed cohort manifest {path}: {e}") from e


def regenerate_cohort(manifest_path: PathLike, out_dir: Optional[PathLike] = None) -> Path:
    """Rebuild every file of a cohort from the seeds in its manifest"""
    manifest = read_manifest(manifest_path)
    return _write_cohort(manifest, Path(out_dir) if out_dir is not None else Path(manifest_path).parent)


def load_cohort(manifest_path: PathLike, split: Optional[str] = None):
    """(manifest, template, template landmarks, [(entry, volume, landmarks)])"""
    manifest = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    template = load_volume(root / manifest.template_volume)
    gt = load_landmarks(root / manifest.template_landmarks)
    entries = manifest.split(split) if split else manifest.subjects
    subjects = [(e, load_volume(root / e.volume), load_landmarks(root / e.landmarks)) for e in entries]
    return manifest, template, gt, subjects
