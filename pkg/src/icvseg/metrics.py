"""Overlap and distance metrics for segmentation masks, evaluated on the
annotated slices only, plus experiment report assembly.

Conventions for degenerate cases: Dice of two empty sets is 1.0 and of an
empty set against a nonempty one is 0.0; Cohen's kappa of two identical
constant labelings is 1.0; the Hausdorff distance is undefined (reported,
not computed) when either mask is empty. The Hausdorff distance is measured
between boundary voxel centers (voxels with a face-adjacent background
neighbor) scaled by the voxel spacing, by brute force over the boundary
sets, which is O(|bA| * |bB|).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .volumes import AnnotatedMask

__all__ = [
    "dice",
    "cohen_kappa",
    "boundary_voxels",
    "hausdorff_mm",
    "ScanMetrics",
    "evaluate_scan",
    "MetricsReport",
    "build_report",
    "format_table",
    "format_records",
]


def _as_binary(a) -> np.ndarray:
    return np.asarray(a) != 0


def _check_same_extents(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mask extents differ: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0 by convention."""
    a = _as_binary(a)
    b = _as_binary(b)
    _check_same_extents(a, b)
    na = int(np.count_nonzero(a))
    nb = int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


def cohen_kappa(a, b, n: Optional[int] = None) -> float:
    """Chance-corrected agreement over the 2x2 table of two binary labelings.

    ``n`` overrides the domain size (defaults to the array size); the
    uncounted remainder is treated as agreed-negative. A degenerate table
    with chance agreement 1 is kappa 1.0 under perfect agreement and is
    rejected otherwise.
    """
    a = _as_binary(a)
    b = _as_binary(b)
    _check_same_extents(a, b)
    n = int(a.size if n is None else n)
    both = int(np.count_nonzero(a & b))
    only_a = int(np.count_nonzero(a & ~b))
    only_b = int(np.count_nonzero(b & ~a))
    if n < both + only_a + only_b + int(np.count_nonzero(~a & ~b)):
        raise ShapeError(f"domain size {n} smaller than the evaluated voxel count")
    neither = n - both - only_a - only_b
    p_o = (both + neither) / n
    pa = (both + only_a) / n
    pb = (both + only_b) / n
    p_e = pa * pb + (1.0 - pa) * (1.0 - pb)
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise DataError("kappa undefined: degenerate table with disagreement")
    return (p_o - p_e) / (1.0 - p_e)


def boundary_voxels(mask) -> np.ndarray:
    """Voxels of the mask with at least one face-adjacent background
    neighbor (the volume border counts as background)."""
    m = _as_binary(mask)
    if m.ndim != 3:
        raise ShapeError(f"mask must be 3-D, got shape {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def _directed_hausdorff_sq(pa: np.ndarray, pb: np.ndarray) -> float:
    """max over pa of the squared distance to the nearest pb point."""
    worst = 0.0
    step = max(1, int(4e6 // max(1, pb.shape[0])))
    for start in range(0, pa.shape[0], step):
        chunk = pa[start : start + step]
        d = ((chunk[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d.min(axis=1).max()))
    return worst


def hausdorff_mm(a, b, spacing) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in mm."""
    a = _as_binary(a)
    b = _as_binary(b)
    _check_same_extents(a, b)
    if not a.any() or not b.any():
        raise DataError("hausdorff distance undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary_voxels(a)) * sp
    pb = np.argwhere(boundary_voxels(b)) * sp
    worst = max(_directed_hausdorff_sq(pa, pb), _directed_hausdorff_sq(pb, pa))
    return float(np.sqrt(worst))


@dataclass
class ScanMetrics:
    scan_id: str
    patient_id: str
    orientation: str
    dice: float
    dice_slicewise: float
    kappa: Optional[float]
    hausdorff_mm: Optional[float]
    hausdorff_note: str
    slices: tuple


def evaluate_scan(reference: AnnotatedMask, prediction, spacing=None,
                  scan_id: str = "") -> ScanMetrics:
    """Metrics over the voxel domain restricted to the reference's annotated
    slices; the prediction off those slices is ignored entirely."""
    pred = _as_binary(prediction.data if hasattr(prediction, "data") else prediction)
    ref = reference.data != 0
    _check_same_extents(ref, pred)
    slices = reference.annotated_slices
    if not slices:
        raise DataError(f"reference for {scan_id or reference.patient_id} has no annotated slices")
    sl = np.asarray(slices, dtype=np.intp)
    ref_r = ref[:, :, sl]
    pred_r = pred[:, :, sl]

    d3 = dice(ref_r, pred_r)
    per_slice = [dice(ref_r[:, :, i], pred_r[:, :, i]) for i in range(sl.size)]
    d2 = float(np.mean(per_slice))
    try:
        kappa = cohen_kappa(ref_r, pred_r)
    except DataError:
        kappa = None

    sp = spacing if spacing is not None else reference.spacing
    ref_sparse = np.zeros(ref.shape, dtype=bool)
    ref_sparse[:, :, sl] = ref_r
    pred_sparse = np.zeros(pred.shape, dtype=bool)
    pred_sparse[:, :, sl] = pred_r
    if not ref_sparse.any() or not pred_sparse.any():
        hd, note = None, "undefined (empty mask on annotated slices)"
    else:
        hd, note = hausdorff_mm(ref_sparse, pred_sparse, sp), ""

    return ScanMetrics(
        scan_id=scan_id or f"{reference.patient_id}_{reference.orientation}",
        patient_id=reference.patient_id,
        orientation=reference.orientation,
        dice=d3,
        dice_slicewise=d2,
        kappa=kappa,
        hausdorff_mm=hd,
        hausdorff_note=note,
        slices=tuple(slices),
    )


@dataclass
class MetricsReport:
    label: str
    scans: list
    group_means: dict  # orientation -> mean dice over that orientation's scans
    overall_mean: Optional[float]


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def build_report(scans: Sequence[ScanMetrics], label: str) -> MetricsReport:
    orientations = sorted({s.orientation for s in scans})
    groups = {}
    for o in orientations:
        groups[o] = _mean_or_none([s.dice for s in scans if s.orientation == o])
    return MetricsReport(
        label=label,
        scans=list(scans),
        group_means=groups,
        overall_mean=_mean_or_none([s.dice for s in scans]),
    )


def _fmt(v, nd=4):
    return "undefined" if v is None else f"{v:.{nd}f}"


def format_records(report: MetricsReport) -> str:
    """Machine-readable per-scan records as blocks of key=value lines."""
    blocks = [f"label={report.label}"]
    for s in report.scans:
        blocks.append("\n".join([
            f"scan={s.scan_id}",
            f"patient_id={s.patient_id}",
            f"orientation={s.orientation}",
            f"dice={_fmt(s.dice, 6)}",
            f"dice_slicewise={_fmt(s.dice_slicewise, 6)}",
            f"kappa={_fmt(s.kappa, 6)}",
            f"hausdorff_mm={_fmt(s.hausdorff_mm, 6)}",
            f"slices={','.join(str(i) for i in s.slices)}",
        ]))
    summary = [f"mean_dice_{o}={_fmt(m, 6)}" for o, m in report.group_means.items()]
    summary.append(f"mean_dice_overall={_fmt(report.overall_mean, 6)}")
    blocks.append("\n".join(summary))
    return "\n\n".join(blocks) + "\n"


def format_table(report: MetricsReport) -> str:
    """Aligned-column summary: mean Dice per test orientation for the
    training-set composition named by the report label."""
    headers = ["Training set composition", "Axial", "Coronal", "Sagittal", "All"]
    row = [report.label]
    for o in ("axial", "coronal", "sagittal"):
        m = report.group_means.get(o)
        row.append("-" if m is None else f"{m:.2f}")
    row.append("-" if report.overall_mean is None else f"{report.overall_mean:.2f}")
    widths = [max(len(h), len(r)) for h, r in zip(headers, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join(r.ljust(w) for r, w in zip(row, widths)),
    ]
    return "\n".join(lines) + "\n"


def write_report(out_dir, report: MetricsReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report_records.txt").write_text(format_records(report))
    (out / "report_table.txt").write_text(format_table(report))
