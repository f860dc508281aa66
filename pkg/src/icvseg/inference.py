"""Whole-volume segmentation: per-pixel classification slice by slice,
probability thresholding, and largest-3D-connected-component filtering.

Classification can run on a coarser pixel grid (``pixel_stride`` > 1) for
speed; off-grid pixels copy their nearest grid neighbor (ties toward the
smaller index). The component filter supports 26-connectivity (default)
and 6-connectivity in voxel space, ignoring anisotropic spacing.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .network import NetworkSpec, ParameterSet, check_params_match, forward
from .sampling import extract_patch_stack
from .volumes import Volume, extract_slice

__all__ = [
    "ProbabilityVolume",
    "Provenance",
    "SegmentationMask",
    "segment_volume",
    "threshold",
    "label_components_3d",
    "largest_component_3d",
]

_INFER_CHUNK = 256  # pixels classified per network call


@dataclass
class ProbabilityVolume:
    """Per-voxel foreground probability, same extents as the input volume."""

    data: np.ndarray
    spacing: tuple
    orientation: str = "unknown"
    patient_id: str = ""


@dataclass(frozen=True)
class Provenance:
    checkpoint: str = ""
    threshold_rule: str = "argmax"
    component_rule: str = "26-connected"
    empty_input: bool = False


@dataclass
class SegmentationMask:
    data: np.ndarray
    provenance: Provenance = field(default_factory=Provenance)

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.data))


def _nearest_grid_index(extent: int, stride: int) -> np.ndarray:
    """Map each pixel index to its nearest stride-grid index (ties go low)."""
    grid_len = (extent + stride - 1) // stride
    idx = (np.arange(extent) + (stride - 1) // 2) // stride
    return np.minimum(idx, grid_len - 1)


def segment_volume(volume: Volume, params: ParameterSet, spec: NetworkSpec,
                   pixel_stride: int = 1, chunk: int = _INFER_CHUNK) -> ProbabilityVolume:
    """Classify every pixel of every slice of a normalized volume.

    With ``pixel_stride`` > 1 only the stride grid is classified and the
    remaining pixels copy their nearest grid neighbor, so grid-point
    probabilities are identical across stride settings.
    """
    if pixel_stride < 1:
        raise ConfigError(f"pixel_stride must be >= 1, got {pixel_stride}")
    check_params_match(spec, params)
    x, y, z = volume.shape
    sizes = spec.patch_sizes
    pad = max(sizes) // 2
    rows = np.arange(0, x, pixel_stride)
    cols = np.arange(0, y, pixel_stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    out = np.empty((x, y, z), dtype=np.float32)
    row_map = _nearest_grid_index(x, pixel_stride)
    col_map = _nearest_grid_index(y, pixel_stride)
    for zi in range(z):
        plane = extract_slice(volume, zi).astype(np.float32, copy=False)
        padded = np.pad(plane, pad, mode="reflect") if pad else plane
        grid = np.empty((rows.size, cols.size), dtype=np.float32)
        flat = grid.reshape(-1)
        for start in range(0, rr.size, chunk):
            stop = min(start + chunk, rr.size)
            patches = extract_patch_stack(plane, rr[start:stop], cc[start:stop],
                                          sizes, padded=padded)
            probs = forward(params, spec, patches, mode="infer")
            flat[start:stop] = probs[:, 1]
        out[:, :, zi] = grid[np.ix_(row_map, col_map)]
    return ProbabilityVolume(data=out, spacing=volume.spacing,
                             orientation=volume.orientation, patient_id=volume.patient_id)


def threshold(prob, rule: str = "argmax") -> np.ndarray:
    """Binarize a probability volume: positive iff foreground probability
    exceeds 0.5 (two-class argmax; an exact tie is negative)."""
    if rule != "argmax":
        raise ConfigError(f"unknown threshold rule {rule!r}")
    data = prob.data if isinstance(prob, ProbabilityVolume) else np.asarray(prob)
    return (data > 0.5).astype(np.uint8)


_OFFSETS_26 = [(dx, dy, dz)
               for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
               if (dx, dy, dz) != (0, 0, 0)]
_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def label_components_3d(binary, connectivity: int = 26):
    """Label connected components of a binary volume by breadth-first
    expansion over flat indices; labels are assigned in ascending order of
    each component's smallest row-major voxel index.

    Returns ``(labels, sizes)`` where labels is int32 with 0 as background
    and ``sizes[k]`` is the voxel count of label ``k + 1``.
    """
    if connectivity not in (6, 26):
        raise ConfigError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(binary) != 0
    if mask.ndim != 3:
        raise ShapeError(f"binary volume must be 3-D, got shape {mask.shape}")
    padded = np.pad(mask, 1, constant_values=False)
    px, py, pz = padded.shape
    flat = padded.ravel()
    offs = _OFFSETS_26 if connectivity == 26 else _OFFSETS_6
    offsets = np.array([(dx * py + dy) * pz + dz for dx, dy, dz in offs], dtype=np.intp)
    labels = np.zeros(flat.size, dtype=np.int32)
    sizes = []
    for seed in np.flatnonzero(flat):
        if labels[seed]:
            continue
        lbl = len(sizes) + 1
        labels[seed] = lbl
        count = 1
        frontier = np.array([seed], dtype=np.intp)
        while frontier.size:
            nbr = (frontier[:, None] + offsets[None, :]).ravel()
            nbr = np.unique(nbr[flat[nbr] & (labels[nbr] == 0)])
            labels[nbr] = lbl
            count += nbr.size
            frontier = nbr
        sizes.append(count)
    labels3 = labels.reshape(px, py, pz)[1:-1, 1:-1, 1:-1]
    return labels3, np.array(sizes, dtype=np.int64)


def largest_component_3d(binary, connectivity: int = 26,
                         provenance: Optional[Provenance] = None) -> SegmentationMask:
    """Keep only the largest connected component of a binary volume.

    A size tie keeps the component with the smallest row-major voxel index.
    An empty input yields an empty mask flagged in the provenance.
    """
    labels, sizes = label_components_3d(binary, connectivity)
    prov = provenance if provenance is not None else Provenance()
    prov = replace(prov, component_rule=f"{connectivity}-connected")
    if sizes.size == 0:
        return SegmentationMask(
            data=np.zeros(np.asarray(binary).shape, dtype=np.uint8),
            provenance=replace(prov, empty_input=True),
        )
    keep = int(np.argmax(sizes)) + 1  # argmax takes the first max: smallest min-index
    return SegmentationMask(data=(labels == keep).astype(np.uint8), provenance=prov)
