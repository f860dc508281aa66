"""Synthetic benchmark volumes with analytically known ground truth.

Each phantom is a smooth-textured ellipsoid ("brain") wrapped in a bright
rim ("skull"), surrounded by elongated clutter structures ("maternal
tissue") and additive Gaussian noise. The reference mask is the exact
ellipsoid interior, restricted to 10 equidistant annotated slices over the
mask's through-plane range. A patient owns one ellipsoid geometry; each of
the patient's scans re-renders that geometry with the volume axes permuted
to the scan's orientation tag, so the three scans share the same analytic
volume. Realism is deliberately minimal: these volumes exist to exercise
the pipeline and the orientation-mixing experiment design, not to imitate
MR physics.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .volumes import AnnotatedMask, DatasetSplit, Volume, select_annotated_slices

__all__ = [
    "PhantomConfig",
    "EllipsoidGeometry",
    "ellipsoid_geometry",
    "generate_phantom",
    "generate_dataset",
    "patient_split",
    "ORIENTATION_AXES",
]

# patient-frame axis carried by each volume axis, per orientation tag
ORIENTATION_AXES = {
    "axial": (0, 1, 2),
    "coronal": (0, 2, 1),
    "sagittal": (2, 1, 0),
}


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple = (128, 128, 32)
    spacing: tuple = (0.7, 0.7, 2.5)
    radius_range: tuple = (15.0, 19.0)  # mm, per semi-axis
    clutter_density: float = 1.0
    noise_level: float = 0.03
    orientation: str = "axial"
    seed: int = 0
    annotated_count: int = 10
    patient_id: str = ""


@dataclass(frozen=True)
class EllipsoidGeometry:
    radii_mm: tuple  # patient-frame semi-axes
    center_jitter_mm: tuple

    def analytic_volume_mm3(self) -> float:
        a, b, c = self.radii_mm
        return 4.0 / 3.0 * np.pi * a * b * c


def ellipsoid_geometry(config: PhantomConfig) -> EllipsoidGeometry:
    """Patient geometry derived deterministically from the config seed."""
    rng = np.random.default_rng(np.random.SeedSequence((int(config.seed), 0)))
    lo, hi = config.radius_range
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid radius range {config.radius_range}")
    radii = tuple(float(r) for r in rng.uniform(lo, hi, size=3))
    jitter = tuple(float(j) for j in rng.uniform(-3.0, 3.0, size=3))
    return EllipsoidGeometry(radii_mm=radii, center_jitter_mm=jitter)


def _axis_coords_mm(extent: int, spacing: float) -> np.ndarray:
    return np.arange(extent, dtype=np.float64) * spacing


def _smooth_field(rng, extents, grid=(6, 6, 4)):
    """Low-frequency random field in [-1, 1] by trilinear upsampling of a
    coarse noise grid."""
    coarse = rng.uniform(-1.0, 1.0, size=grid)
    out = coarse
    for axis, extent in enumerate(extents):
        n = out.shape[axis]
        pos = np.linspace(0, n - 1, extent)
        i0 = np.clip(pos.astype(int), 0, n - 2)
        frac = pos - i0
        lo = np.take(out, i0, axis=axis)
        hi = np.take(out, i0 + 1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = extent
        f = frac.reshape(shape)
        out = lo * (1 - f) + hi * f
    return out


def _render(config: PhantomConfig, geometry: EllipsoidGeometry,
            render_seed, patient_id: str):
    ex, ey, ez = config.extents
    sx, sy, sz = config.spacing
    perm = ORIENTATION_AXES.get(config.orientation)
    if perm is None:
        raise ConfigError(f"unknown orientation {config.orientation!r}")
    radii = tuple(geometry.radii_mm[p] for p in perm)
    jitter = tuple(geometry.center_jitter_mm[p] for p in perm)
    spacing = (sx, sy, sz)
    for axis, (extent, sp, r) in enumerate(zip(config.extents, spacing, radii)):
        if r / sp + 2 > extent / 2:
            raise ConfigError(
                f"radius {r:.1f} mm does not fit axis {axis} "
                f"(extent {extent} at {sp} mm) with a 2-voxel margin"
            )

    center = tuple((e - 1) / 2.0 * s + j for e, s, j in zip(config.extents, spacing, jitter))
    cx = (_axis_coords_mm(ex, sx) - center[0]) / radii[0]
    cy = (_axis_coords_mm(ey, sy) - center[1]) / radii[1]
    cz = (_axis_coords_mm(ez, sz) - center[2]) / radii[2]
    level = cx[:, None, None] ** 2 + cy[None, :, None] ** 2 + cz[None, None, :] ** 2
    interior = level <= 1.0
    rim = (level > 1.0) & (level <= 1.35)
    outside = level > 1.35

    rng = np.random.default_rng(render_seed)
    texture = _smooth_field(rng, config.extents)
    img = np.zeros(config.extents, dtype=np.float64)
    img[interior] = 0.55 + 0.18 * texture[interior]
    img[rim] = 1.0 + 0.05 * texture[rim]

    n_clutter = int(round(config.clutter_density * rng.integers(3, 9)))
    clutter = np.zeros(config.extents, dtype=np.float64)
    xs = _axis_coords_mm(ex, sx)
    ys = _axis_coords_mm(ey, sy)
    zs = _axis_coords_mm(ez, sz)
    phys = (xs[-1], ys[-1], zs[-1])
    for _ in range(n_clutter):
        c = rng.uniform(0.1, 0.9, size=3) * phys
        r = np.array([rng.uniform(2.0, 6.0), rng.uniform(2.0, 6.0), rng.uniform(2.0, 6.0)])
        r[rng.integers(0, 3)] = rng.uniform(15.0, 40.0)  # one elongated axis
        lv = ((xs - c[0]) / r[0])[:, None, None] ** 2 \
            + ((ys - c[1]) / r[1])[None, :, None] ** 2 \
            + ((zs - c[2]) / r[2])[None, None, :] ** 2
        clutter[lv <= 1.0] = rng.uniform(0.35, 0.75)
    img[outside] = clutter[outside]

    if config.noise_level < 0:
        raise ConfigError(f"noise level must be >= 0, got {config.noise_level}")
    img += rng.normal(0.0, config.noise_level, size=config.extents)
    np.clip(img, 0.0, None, out=img)

    occupied = np.flatnonzero(interior.any(axis=(0, 1)))
    z_range = (int(occupied[0]), int(occupied[-1]))
    slices = select_annotated_slices(ez, config.annotated_count, z_range=z_range)
    mask_data = np.zeros(config.extents, dtype=np.uint8)
    sl = np.asarray(slices, dtype=np.intp)
    mask_data[:, :, sl] = interior[:, :, sl]

    volume = Volume(data=img.astype(np.float32), spacing=spacing,
                    orientation=config.orientation, patient_id=patient_id)
    mask = AnnotatedMask(data=mask_data, annotated_slices=slices, spacing=spacing,
                         orientation=config.orientation, patient_id=patient_id)
    return volume, mask


def generate_phantom(config: PhantomConfig):
    """(Volume, AnnotatedMask) pair, bitwise deterministic per seed."""
    geometry = ellipsoid_geometry(config)
    pid = config.patient_id or f"pat{config.seed:03d}"
    render_seed = np.random.SeedSequence(
        (int(config.seed), 1, list(ORIENTATION_AXES).index(config.orientation)))
    return _render(config, geometry, render_seed, pid)


def generate_dataset(n_patients: int, scans_per_patient: int = 3, base_seed: int = 0,
                     config: Optional[PhantomConfig] = None):
    """Per patient, one scan per orientation sharing the ellipsoid geometry.

    Returns a list of (Volume, AnnotatedMask) pairs, ordered by patient then
    orientation (axial, coronal, sagittal).
    """
    if n_patients < 2:
        raise ConfigError(f"need at least 2 patients, got {n_patients}")
    if not 1 <= scans_per_patient <= 3:
        raise ConfigError(f"scans_per_patient must be 1..3, got {scans_per_patient}")
    base = config if config is not None else PhantomConfig()
    scans = []
    for p in range(n_patients):
        pid = f"pat{p:03d}"
        patient_seed = int(np.random.SeedSequence((int(base_seed), int(p))).generate_state(1)[0])
        pconf = replace(base, seed=patient_seed, patient_id=pid)
        geometry = ellipsoid_geometry(pconf)
        for oi, orientation in enumerate(list(ORIENTATION_AXES)[:scans_per_patient]):
            render_seed = np.random.SeedSequence((int(base_seed), int(p), 1, oi))
            scans.append(_render(replace(pconf, orientation=orientation),
                                 geometry, render_seed, pid))
    return scans


def patient_split(patient_ids, n_test: int = 3) -> DatasetSplit:
    """Deterministic patient-level split: sorted ids, the last ``n_test``
    patients become the test set."""
    ids = sorted(set(patient_ids))
    if n_test < 1 or n_test >= len(ids):
        raise ConfigError(f"cannot hold out {n_test} of {len(ids)} patients")
    return DatasetSplit(train_patients=tuple(ids[:-n_test]),
                        test_patients=tuple(ids[-n_test:]))
