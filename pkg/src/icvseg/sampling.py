"""Multi-scale patch extraction and class-balanced training-set sampling.

Patches are windows of a slice after reflect-padding the slice by half the
largest patch size, so border pixels get mirrored context instead of
artificial zeros. Each epoch draws, per scan, an equal number of positive
and negative pixel coordinates restricted to the annotated slices, then
shuffles the combined plan. Epoch ``e`` of a run with base seed ``s`` uses
the derived seed ``SeedSequence((s, e))``, so every epoch resamples
differently yet reproducibly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .volumes import AnnotatedMask, Volume, extract_slice, normalize_intensity

__all__ = [
    "PatchTriple",
    "TrainingScan",
    "EpochPlan",
    "epoch_seed",
    "extract_patch_triple",
    "extract_patch_stack",
    "build_epoch_plan",
    "stream_minibatches",
]


@dataclass(frozen=True)
class PatchTriple:
    """Three co-centered square patches (small to large) around one pixel."""

    patches: tuple
    source: tuple  # (scan_id, slice, row, col)
    label: Optional[int] = None


@dataclass
class TrainingScan:
    scan_id: str
    image: Volume
    mask: AnnotatedMask


@dataclass
class EpochPlan:
    """Sampled (scan, slice, row, col, label) coordinates for one epoch."""

    scan_ids: tuple
    scan_index: np.ndarray
    slice_index: np.ndarray
    row: np.ndarray
    col: np.ndarray
    label: np.ndarray
    seed: int

    def __len__(self):
        return self.label.shape[0]


def epoch_seed(base_seed: int, epoch: int) -> int:
    """Deterministic per-epoch seed: first word of SeedSequence((base, epoch))."""
    return int(np.random.SeedSequence((int(base_seed), int(epoch))).generate_state(1)[0])


def _check_patch_sizes(patch_sizes):
    sizes = tuple(int(s) for s in patch_sizes)
    if any(s < 1 or s % 2 == 0 for s in sizes):
        raise ShapeError(f"patch sizes must be odd and positive, got {sizes}")
    return sizes


def _pad_slice(slice_image: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return slice_image
    return np.pad(slice_image, pad, mode="reflect")


def extract_patch_stack(slice_image, rows, cols, patch_sizes,
                        padded: Optional[np.ndarray] = None):
    """Windows of every requested size around each (row, col) center.

    Returns one ``[len(rows), s, s]`` array per patch size. ``padded`` may
    supply a pre-padded slice (reflect, half the largest size) to amortize
    padding across calls.
    """
    sizes = _check_patch_sizes(patch_sizes)
    slice_image = np.asarray(slice_image)
    if slice_image.ndim != 2:
        raise ShapeError(f"slice must be 2-D, got shape {slice_image.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    h, w = slice_image.shape
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise ShapeError(f"patch centers fall outside the {h}x{w} slice")
    pad = max(sizes) // 2
    if padded is None:
        padded = _pad_slice(slice_image, pad)
    out = []
    for s in sizes:
        half = s // 2
        view = np.lib.stride_tricks.sliding_window_view(padded, (s, s))
        out.append(view[rows + pad - half, cols + pad - half])
    return out


def extract_patch_triple(slice_image, row: int, col: int, patch_sizes) -> PatchTriple:
    """One multi-scale patch triple centered at (row, col); label unset."""
    stacks = extract_patch_stack(slice_image, [row], [col], patch_sizes)
    return PatchTriple(patches=tuple(s[0] for s in stacks),
                       source=("", -1, int(row), int(col)))


def _annotated_coordinates(mask: AnnotatedMask):
    """(positive, negative) arrays of (slice, row, col) on annotated slices."""
    pos, neg = [], []
    for z in mask.annotated_slices:
        plane = mask.data[:, :, z]
        pr, pc = np.nonzero(plane)
        nr, nc = np.nonzero(plane == 0)
        if pr.size:
            pos.append(np.column_stack([np.full(pr.size, z), pr, pc]))
        if nr.size:
            neg.append(np.column_stack([np.full(nr.size, z), nr, nc]))
    pos = np.concatenate(pos) if pos else np.empty((0, 3), dtype=np.intp)
    neg = np.concatenate(neg) if neg else np.empty((0, 3), dtype=np.intp)
    return pos, neg


def build_epoch_plan(scans: Sequence[TrainingScan], samples_per_class: int,
                     seed: int) -> EpochPlan:
    """Per scan, draw ``samples_per_class`` positives and as many negatives
    uniformly from the annotated slices (with replacement only when a class
    has fewer voxels than requested), then shuffle the combined plan."""
    if samples_per_class < 1:
        raise ConfigError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if not scans:
        raise ConfigError("no scans to sample from")
    rng = np.random.default_rng(seed)
    chunks = []
    for si, scan in enumerate(scans):
        pos, neg = _annotated_coordinates(scan.mask)
        for cls, coords in ((1, pos), (0, neg)):
            if coords.shape[0] == 0:
                raise DataError(
                    f"scan {scan.scan_id} has no class-{cls} voxels on annotated slices"
                )
            pick = rng.choice(coords.shape[0], size=samples_per_class,
                              replace=coords.shape[0] < samples_per_class)
            chosen = coords[pick]
            chunk = np.column_stack([
                np.full(samples_per_class, si),
                chosen,
                np.full(samples_per_class, cls),
            ])
            chunks.append(chunk)
    plan = np.concatenate(chunks)
    plan = plan[rng.permutation(plan.shape[0])]
    return EpochPlan(
        scan_ids=tuple(s.scan_id for s in scans),
        scan_index=plan[:, 0].astype(np.int32),
        slice_index=plan[:, 1].astype(np.int32),
        row=plan[:, 2].astype(np.int32),
        col=plan[:, 3].astype(np.int32),
        label=plan[:, 4].astype(np.int32),
        seed=int(seed),
    )


def stream_minibatches(plan: EpochPlan, scans: Sequence[TrainingScan],
                       batch_size: int, patch_sizes):
    """Yield ``(patch_arrays, labels)`` batches covering the plan exactly once.

    Patches are extracted lazily from intensity-normalized slices; padded
    slices are cached per (scan, slice) for the lifetime of the stream.
    Labels stream in plan order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    sizes = _check_patch_sizes(patch_sizes)
    if len(plan) == 0:
        raise ConfigError("empty epoch plan")
    if plan.scan_index.max() >= len(scans):
        raise DataError("plan references a scan index outside the dataset")
    pad = max(sizes) // 2

    normalized = {}
    padded_cache = {}

    def padded_slice(si, z):
        key = (si, z)
        if key not in padded_cache:
            if si not in normalized:
                normalized[si] = normalize_intensity(scans[si].image).data
            vol = normalized[si]
            if not 0 <= z < vol.shape[2]:
                raise DataError(
                    f"plan slice {z} outside scan {scans[si].scan_id} with {vol.shape[2]} slices"
                )
            padded_cache[key] = _pad_slice(extract_slice(vol, z), pad)
        return padded_cache[key]

    for si, scan in enumerate(scans):
        shape = scan.image.shape
        rows_of = plan.scan_index == si
        if rows_of.any():
            if (plan.row[rows_of].max() >= shape[0] or plan.col[rows_of].max() >= shape[1]
                    or plan.row[rows_of].min() < 0 or plan.col[rows_of].min() < 0
                    or plan.slice_index[rows_of].max() >= shape[2]
                    or plan.slice_index[rows_of].min() < 0):
                raise DataError(f"plan has coordinates outside scan {scan.scan_id} (corrupt plan)")

    n = len(plan)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        count = stop - start
        batch = [np.empty((count, s, s), dtype=np.float32) for s in sizes]
        labels = plan.label[start:stop].copy()
        keys = np.stack([plan.scan_index[start:stop], plan.slice_index[start:stop]], axis=1)
        for si, z in np.unique(keys, axis=0):
            where = np.nonzero((keys[:, 0] == si) & (keys[:, 1] == z))[0]
            padded = padded_slice(int(si), int(z))
            stacks = extract_patch_stack(
                normalized[int(si)][:, :, int(z)],
                plan.row[start:stop][where], plan.col[start:stop][where],
                sizes, padded=padded,
            )
            for b, s in zip(batch, stacks):
                b[where] = s
        yield batch, labels
