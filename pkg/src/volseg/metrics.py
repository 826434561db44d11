"""Challenge-style segmentation metrics and cohort reports.

Conventions (all recorded in report headers):

* Dice: both masks empty -> 1, exactly one empty -> 0.
* Sensitivity / specificity: an empty denominator scores 1.
* HD95: surface voxels are mask voxels with a 6-neighbor outside the mask
  (voxels beyond the volume edge count as outside). Directed distances run
  from each surface voxel of one mask to the nearest surface voxel of the
  other; the 95th percentile (linear interpolation) is taken per direction
  and the maximum of both directions is reported. Both empty -> 0; one
  empty -> sentinel, by default the volume diagonal in mm.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError
from .regions import REGION_NAMES, labels_to_regions

METRICS = ("dice", "hd95", "sensitivity", "specificity")
CONVENTIONS = {
    "hd95_combination": "max_of_directed_p95",
    "hd95_empty_sentinel": "volume_diagonal_mm",
    "percentile": "linear",
    "surface_connectivity": "6",
    "dice_both_empty": "1",
}

_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def _pair(pred, ref):
    p = np.asarray(pred).astype(bool)
    r = np.asarray(ref).astype(bool)
    if p.shape != r.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {r.shape}")
    return p, r


def dice(pred, ref) -> float:
    p, r = _pair(pred, ref)
    total = p.sum() + r.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, r).sum() / total)


def sensitivity(pred, ref) -> float:
    p, r = _pair(pred, ref)
    tp = np.logical_and(p, r).sum()
    fn = np.logical_and(~p, r).sum()
    return 1.0 if tp + fn == 0 else float(tp / (tp + fn))


def specificity(pred, ref) -> float:
    p, r = _pair(pred, ref)
    tn = np.logical_and(~p, ~r).sum()
    fp = np.logical_and(p, ~r).sum()
    return 1.0 if tn + fp == 0 else float(tn / (tn + fp))


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels that have at least one face neighbor outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        structure = _FACE_NEIGHBORS
    else:
        structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def volume_diagonal(shape, spacing) -> float:
    return float(np.sqrt(np.sum((np.asarray(shape) * np.asarray(spacing, dtype=float)) ** 2)))


def directed_surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist_to_b[sa]


def hd95(pred, ref, spacing=(1.0, 1.0, 1.0), sentinel: Optional[float] = None) -> float:
    p, r = _pair(pred, ref)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != p.ndim:
        raise ShapeError(f"spacing {spacing} does not match {p.ndim}-d masks")
    has_p, has_r = p.any(), r.any()
    if not has_p and not has_r:
        return 0.0
    if not has_p or not has_r:
        return volume_diagonal(p.shape, spacing) if sentinel is None else float(sentinel)
    d_pr = directed_surface_distances(p, r, spacing)
    d_rp = directed_surface_distances(r, p, spacing)
    return float(max(np.percentile(d_pr, 95), np.percentile(d_rp, 95)))


@dataclass
class CaseMetrics:
    case_id: str
    values: Dict[str, Dict[str, float]]  # region -> metric -> value

    def get(self, region: str, metric: str) -> float:
        return self.values[region][metric]


def case_metrics(pred_labels, ref_labels, spacing=(1.0, 1.0, 1.0), case_id: str = "",
                 sentinel: Optional[float] = None) -> CaseMetrics:
    pred_r = labels_to_regions(pred_labels)
    ref_r = labels_to_regions(ref_labels)
    values = {}
    for name in REGION_NAMES:
        p, r = getattr(pred_r, name), getattr(ref_r, name)
        values[name] = {
            "dice": dice(p, r),
            "hd95": hd95(p, r, spacing, sentinel),
            "sensitivity": sensitivity(p, r),
            "specificity": specificity(p, r),
        }
    return CaseMetrics(case_id, values)


# column order follows the usual challenge tables: ET, WT, TC
REPORT_REGIONS = ("et", "wt", "tc")
COLUMNS = [(m, r) for m in METRICS for r in REPORT_REGIONS]
_COLUMN_TITLES = {"dice": "Dice", "hd95": "HD95", "sensitivity": "Sens", "specificity": "Spec"}
_REGION_TITLES = {"et": "enh", "wt": "whole", "tc": "core"}


@dataclass
class CohortReport:
    cases: List[CaseMetrics]
    summary: Dict[str, Dict[tuple, float]] = field(default_factory=dict)
    conventions: Dict[str, str] = field(default_factory=lambda: dict(CONVENTIONS))

    def column(self, metric: str, region: str) -> np.ndarray:
        return np.array([c.get(region, metric) for c in self.cases])

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for key, value in self.conventions.items():
            buf.write(f"# {key}={value}\n")
        header = ["case"] + [f"{_COLUMN_TITLES[m]}_{_REGION_TITLES[r]}" for m, r in COLUMNS]
        buf.write("\t".join(header) + "\n")
        for c in self.cases:
            buf.write("\t".join([c.case_id] + [f"{c.get(r, m):.6g}" for m, r in COLUMNS]) + "\n")
        for stat in ("Mean", "StdDev", "Median"):
            buf.write("\t".join([stat] + [f"{self.summary[stat][col]:.6g}" for col in COLUMNS]) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_tsv())


def evaluate_cohort(pred_labels: Sequence, ref_labels: Sequence, spacings=None,
                    case_ids: Optional[Sequence[str]] = None,
                    sentinel: Optional[float] = None) -> CohortReport:
    """Per-case metrics over ET/WT/TC plus mean, std-dev (population) and median."""
    n = len(pred_labels)
    if n == 0 or n != len(ref_labels):
        raise ContractError(f"need aligned, nonempty case lists (got {n} and {len(ref_labels)})")
    if spacings is None:
        spacings = [(1.0, 1.0, 1.0)] * n
    if len(spacings) != n:
        raise ContractError(f"{len(spacings)} spacings for {n} cases")
    ids = list(case_ids) if case_ids is not None else [f"case{i:03d}" for i in range(n)]
    cases = [
        case_metrics(p, r, s, cid, sentinel)
        for p, r, s, cid in zip(pred_labels, ref_labels, spacings, ids)
    ]
    report = CohortReport(cases)
    if sentinel is not None:
        report.conventions["hd95_empty_sentinel"] = f"{sentinel:g}"
    for stat, fn in (("Mean", np.mean), ("StdDev", np.std), ("Median", np.median)):
        report.summary[stat] = {(m, r): float(fn(report.column(m, r))) for m, r in COLUMNS}
    return report
