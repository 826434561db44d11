"""Whole-volume prediction, mirroring test-time augmentation and ensembling."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Case, Volume, read_volume, write_volume
from .errors import CapacityError, ContractError, ParseError, ShapeError
from .nn import UNet
from .regions import classes_to_labels, regions_to_labels

# bytes of activations per padded voxel per base feature channel; a coarse
# upper estimate covering the stored encoder/decoder maps of one forward pass
_ACTIVATION_FACTOR = 24
DEFAULT_MEMORY_BUDGET = 4 * 1024 ** 3


@dataclass
class Prediction:
    probabilities: np.ndarray  # [C, D, H, W]
    head_mode: str
    provenance: List[Tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.head_mode not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.probabilities.ndim != 4:
            raise ShapeError(f"probabilities must be [C, D, H, W], got {self.probabilities.shape}")

    @property
    def shape(self):
        return self.probabilities.shape[1:]

    def labels(self, threshold: float = 0.5) -> np.ndarray:
        """Challenge labels {0,1,2,4}: argmax for softmax, region gating for sigmoid."""
        if self.head_mode == "softmax":
            return classes_to_labels(self.probabilities.argmax(axis=0))
        return regions_to_labels(self.probabilities, threshold)


def pad_to_multiple(image: np.ndarray, divisor: int):
    """Symmetric zero padding of [C, D, H, W] so spatial dims divide ``divisor``.

    Returns the padded array and the crop slices that undo it.
    """
    pads, crop = [(0, 0)], [slice(None)]
    for s in image.shape[1:]:
        total = (-s) % divisor
        before = total // 2
        pads.append((before, total - before))
        crop.append(slice(before, before + s))
    if any(sum(p) for p in pads):
        image = np.pad(image, pads)
    return image, tuple(crop)


def estimate_memory(net: UNet, spatial_shape) -> int:
    voxels = int(np.prod(spatial_shape))
    return voxels * net.cfg.base_features * _ACTIVATION_FACTOR * np.dtype(net.cfg.dtype).itemsize


def _image_of(case) -> np.ndarray:
    return case.image() if isinstance(case, Case) else np.asarray(case)


def _forward_probabilities(net: UNet, image: np.ndarray, head_index: int,
                           memory_budget: int) -> np.ndarray:
    padded, crop = pad_to_multiple(image, net.cfg.divisor)
    need = estimate_memory(net, padded.shape[1:])
    if need > memory_budget:
        raise CapacityError(
            f"volume {padded.shape[1:]} needs ~{need / 2**30:.1f} GiB > budget "
            f"{memory_budget / 2**30:.1f} GiB; raise the budget or predict tiles externally"
        )
    with T.no_grad():
        logits = net.forward(padded[None].astype(net.cfg.dtype), head_index)
        probs = net.probabilities(logits).data[0]
    return probs[crop].astype(np.float64)


def predict_volume(net: UNet, case, head_index: int = 0, checkpoint_id: str = "model",
                   memory_budget: int = DEFAULT_MEMORY_BUDGET) -> Prediction:
    """Single forward pass over the whole (normalized) case."""
    probs = _forward_probabilities(net, _image_of(case), head_index, memory_budget)
    return Prediction(probs, net.cfg.head_mode, [(checkpoint_id, "none")])


def mirror_variants(flip_axes: Sequence[int] = (0, 1, 2)) -> List[Tuple[int, ...]]:
    """Every subset of ``flip_axes`` (spatial axes), identity first."""
    flip_axes = tuple(flip_axes)
    return [c for r in range(len(flip_axes) + 1) for c in itertools.combinations(flip_axes, r)]


def predict_tta(net: UNet, case, flip_axes: Sequence[int] = (0, 1, 2), head_index: int = 0,
                checkpoint_id: str = "model",
                memory_budget: int = DEFAULT_MEMORY_BUDGET) -> Prediction:
    """Average of predictions over all mirror combinations, each flipped back."""
    image = _image_of(case)
    variants = mirror_variants(flip_axes)
    total = None
    for axes in variants:
        spatial = tuple(a + 1 for a in axes)
        flipped = np.flip(image, spatial) if axes else image
        probs = _forward_probabilities(net, np.ascontiguousarray(flipped), head_index, memory_budget)
        probs = np.flip(probs, spatial) if axes else probs
        total = probs.copy() if total is None else total + probs
    tag = "mirror:" + ";".join("".join("zyx"[a] for a in axes) or "id" for axes in variants)
    return Prediction(total / len(variants), net.cfg.head_mode, [(checkpoint_id, tag)])


def ensemble(preds: Sequence[Prediction]) -> Prediction:
    """Uniform voxelwise mean, summed in argument order."""
    if not preds:
        raise ContractError("ensemble needs at least one prediction")
    modes = {p.head_mode for p in preds}
    if len(modes) != 1:
        raise ContractError(f"cannot ensemble mixed head modes {sorted(modes)}")
    shape = preds[0].probabilities.shape
    for p in preds[1:]:
        if p.probabilities.shape != shape:
            raise ShapeError(f"cannot ensemble shapes {shape} and {p.probabilities.shape}")
    total = preds[0].probabilities.astype(np.float64, copy=True)
    for p in preds[1:]:
        total += p.probabilities
    provenance = [entry for p in preds for entry in p.provenance]
    return Prediction(total / len(preds), preds[0].head_mode, provenance)


def save_prediction(pred: Prediction, directory, spacing=(1.0, 1.0, 1.0)) -> Path:
    """One f32 volume per channel plus a ``prediction.txt`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c, channel in enumerate(pred.probabilities):
        write_volume(Volume(channel.astype(np.float32), spacing), directory / f"prob_c{c}.vseg")
    lines = [f"head_mode={pred.head_mode}", f"channels={pred.probabilities.shape[0]}"]
    lines += [f"provenance={ckpt}\t{variants}" for ckpt, variants in pred.provenance]
    (directory / "prediction.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_prediction(directory) -> Tuple[Prediction, Tuple[float, float, float]]:
    directory = Path(directory)
    sidecar = directory / "prediction.txt"
    meta, provenance = {}, []
    for line in sidecar.read_text().splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            continue
        if key == "provenance":
            ckpt, _, variants = value.partition("\t")
            provenance.append((ckpt, variants))
        else:
            meta[key] = value
    if "head_mode" not in meta or "channels" not in meta:
        raise ParseError(sidecar, "header", "missing head_mode or channels")
    vols = [read_volume(directory / f"prob_c{c}.vseg") for c in range(int(meta["channels"]))]
    probs = np.stack([v.data for v in vols])
    return Prediction(probs, meta["head_mode"], provenance), vols[0].spacing
