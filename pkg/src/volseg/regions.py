"""Label <-> region conversion and the enhancing-tumor size rule.

Raw labels: 0 background, 1 necrosis / non-enhancing core, 2 edema,
4 enhancing tumor. Evaluation regions: whole tumor {1,2,4}, tumor core
{1,4}, enhancing tumor {4}.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ParseError, ShapeError

LABELS = (0, 1, 2, 4)
NECROSIS, EDEMA, ENHANCING = 1, 2, 4
REGION_NAMES = ("wt", "tc", "et")

_LABEL_TO_CLASS = np.zeros(5, dtype=np.int64)
_LABEL_TO_CLASS[list(LABELS)] = np.arange(len(LABELS))
_CLASS_TO_LABEL = np.array(LABELS, dtype=np.uint8)


def _label_array(labels) -> np.ndarray:
    arr = np.asarray(getattr(labels, "data", labels))
    valid = np.isin(arr, LABELS)
    if not valid.all():
        bad = np.unique(arr[~valid])
        raise ValueError(f"unknown label values {bad.tolist()}; expected {LABELS}")
    return arr


@dataclass
class RegionMaps:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise ShapeError("region masks must share one shape")

    def stack(self, dtype=np.uint8) -> np.ndarray:
        """Channels ordered wt, tc, et."""
        return np.stack([self.wt, self.tc, self.et]).astype(dtype)

    @classmethod
    def from_stack(cls, stacked: np.ndarray) -> "RegionMaps":
        stacked = np.asarray(stacked)
        if stacked.shape[0] != 3:
            raise ShapeError(f"expected 3 region channels, got {stacked.shape[0]}")
        return cls(*(stacked[i].astype(bool) for i in range(3)))


def labels_to_regions(labels) -> RegionMaps:
    arr = _label_array(labels)
    return RegionMaps(
        wt=arr > 0,
        tc=(arr == NECROSIS) | (arr == ENHANCING),
        et=arr == ENHANCING,
    )


def region_targets(labels) -> np.ndarray:
    """Batch of label maps [N, ...] -> stacked region masks [N, 3, ...]."""
    arr = _label_array(labels)
    regions = labels_to_regions(arr)
    return np.stack([regions.wt, regions.tc, regions.et], axis=1).astype(np.uint8)


def labels_to_classes(labels) -> np.ndarray:
    """Map labels {0,1,2,4} to contiguous class indices {0,1,2,3}."""
    return _LABEL_TO_CLASS[_label_array(labels)]


def classes_to_labels(classes) -> np.ndarray:
    return _CLASS_TO_LABEL[np.asarray(classes)]


def regions_to_labels(p, threshold: float = 0.5) -> np.ndarray:
    """Decode wt/tc/et probabilities by hierarchical gating.

    wt < t -> background; else tc < t -> edema; else et < t -> necrosis;
    else enhancing.
    """
    p = np.asarray(getattr(p, "probabilities", p))
    if p.shape[0] != 3:
        raise ShapeError(f"expected channels (wt, tc, et), got {p.shape[0]} channels")
    wt, tc, et = p[0] >= threshold, p[1] >= threshold, p[2] >= threshold
    out = np.zeros(p.shape[1:], dtype=np.uint8)
    out[wt] = EDEMA
    out[wt & tc] = NECROSIS
    out[wt & tc & et] = ENHANCING
    return out


@dataclass(frozen=True)
class PostprocessRule:
    et_min_voxels: int = 0

    def __post_init__(self):
        if self.et_min_voxels < 0:
            raise ValueError("et_min_voxels must be nonnegative")

    def save(self, path) -> None:
        Path(path).write_text(f"et_min_voxels={self.et_min_voxels}\n")

    @classmethod
    def load(cls, path) -> "PostprocessRule":
        text = Path(path).read_text().strip()
        key, sep, value = text.partition("=")
        if key.strip() != "et_min_voxels" or not sep:
            raise ParseError(path, "et_min_voxels", f"expected 'et_min_voxels=<n>', got {text!r}")
        try:
            return cls(int(value))
        except ValueError as exc:
            raise ParseError(path, "et_min_voxels", str(exc)) from None


def apply_et_rule(labels, rule: PostprocessRule) -> np.ndarray:
    """Relabel all enhancing voxels as necrosis when there are fewer than the threshold."""
    arr = np.array(getattr(labels, "data", labels), copy=True)
    enhancing = arr == ENHANCING
    if enhancing.sum() < rule.et_min_voxels:
        arr[enhancing] = NECROSIS
    return arr


def _et_stats(predictions, references):
    stats = []
    for pred, ref in zip(predictions, references):
        p = np.asarray(getattr(pred, "data", pred)) == ENHANCING
        r = np.asarray(getattr(ref, "data", ref)) == ENHANCING
        if p.shape != r.shape:
            raise ShapeError(f"prediction {p.shape} and reference {r.shape} differ")
        stats.append((int(p.sum()), int(r.sum()), int((p & r).sum())))
    return stats


def _dice_from_counts(n_pred, n_ref, n_both):
    if n_pred == 0 and n_ref == 0:
        return 1.0
    return 2.0 * n_both / (n_pred + n_ref)


def mean_et_dice(predictions, references, threshold: int) -> float:
    """Mean enhancing-tumor Dice after applying the size rule at ``threshold``."""
    return _mean_et_dice(_et_stats(predictions, references), threshold)


def _mean_et_dice(stats, threshold):
    scores = [
        _dice_from_counts(0, n_ref, 0) if n_pred < threshold else _dice_from_counts(n_pred, n_ref, n_both)
        for n_pred, n_ref, n_both in stats
    ]
    return float(np.mean(scores))


def optimize_threshold(predictions: Sequence, references: Sequence) -> PostprocessRule:
    """Pick the ET size threshold that maximizes mean ET Dice over the cohort.

    Mean Dice is piecewise constant in the threshold with steps only just
    above observed per-case counts, so candidates {0} and each count and
    count + 1 cover every distinct value. Ties go to the smallest threshold.
    """
    if len(predictions) == 0 or len(predictions) != len(references):
        raise ContractError(
            f"need equal-length, nonempty case lists (got {len(predictions)} and {len(references)})"
        )
    stats = _et_stats(predictions, references)
    candidates = sorted({0} | {s[0] for s in stats} | {s[0] + 1 for s in stats})
    best_t, best = 0, -1.0
    for t in candidates:
        score = _mean_et_dice(stats, t)
        if score > best:
            best_t, best = t, score
    return PostprocessRule(best_t)
