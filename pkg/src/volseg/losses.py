"""Soft Dice, cross-entropy and their unweighted sum, for softmax and region heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, make_result

LOSS_KINDS = ("dice", "ce", "dice_plus_ce")
CLASS_SETS = ("foreground", "all")


@dataclass
class LossConfig:
    kind: str = "dice"
    class_set: str = "foreground"
    smooth_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.class_set not in CLASS_SETS:
            raise ValueError(f"class_set must be one of {CLASS_SETS}, got {self.class_set!r}")
        if self.smooth_eps < 0:
            raise ValueError("smooth_eps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Class-index map [N, *spatial] -> one-hot [N, K, *spatial]."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class indices must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def _soft_dice(u: Tensor, v: Tensor, eps: float) -> Tensor:
    # i-sum pools the batch axis together with all spatial axes
    axes = (0,) + tuple(range(2, u.ndim))
    intersection = (u * v).sum(axes)
    denominator = u.sum(axes) + v.sum(axes)
    if eps:
        denominator = denominator + eps
    ratio = (intersection / denominator).sum()
    return ratio * (-2.0 / u.shape[1])


def dice_loss(u: Tensor, v, cfg: LossConfig = LossConfig()) -> Tensor:
    """Multiclass soft Dice: -(2/|K|) sum_k sum_i u*v / (sum_i u + sum_i v).

    ``u`` holds probabilities [N, K, ...], ``v`` the one-hot reference of the
    same shape. With ``cfg.class_set == "foreground"`` channel 0 is left out
    of K.
    """
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=u.dtype))
    if u.shape != v.shape:
        raise ShapeError(f"dice_loss: probabilities {u.shape} vs reference {v.shape}")
    if cfg.class_set == "foreground":
        if u.shape[1] < 2:
            raise ShapeError("foreground-only Dice needs at least two classes")
        u = u[:, 1:]
        v = v[:, 1:]
    return _soft_dice(u, v, cfg.smooth_eps)


def region_dice_loss(p: Tensor, masks, cfg: LossConfig = LossConfig()) -> Tensor:
    """Dice over overlapping region channels (sigmoid head); every channel counts."""
    masks = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    if p.shape != masks.shape:
        raise ShapeError(f"region_dice_loss: probabilities {p.shape} vs masks {masks.shape}")
    if not np.all((masks == 0) | (masks == 1)):
        raise ValueError("region masks must be binary")
    return _soft_dice(p, Tensor(masks.astype(p.dtype)), cfg.smooth_eps)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the class-index map ``labels`` [N, ...]."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy labels must be integer class indices")
    target = Tensor(one_hot(labels, k, dtype=logits.dtype))
    nll = (T.log_softmax(logits, axis=1) * target).sum()
    return nll * (-1.0 / labels.size)


def binary_cross_entropy(logits: Tensor, masks) -> Tensor:
    """Mean sigmoid cross-entropy over all region channels and voxels."""
    m = np.asarray(masks.data if isinstance(masks, Tensor) else masks).astype(logits.dtype)
    if m.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy: logits {logits.shape} vs masks {m.shape}")
    x = logits.data
    per_voxel = np.maximum(x, 0) - x * m + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    z = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * (sig - m) / n,)

    return make_result(np.asarray(per_voxel.mean(), dtype=logits.dtype), (logits,), backward)


def combined_loss(logits: Tensor, target, cfg: LossConfig, head_mode: str = "softmax") -> Tensor:
    """Dice + cross-entropy, unweighted.

    ``target`` is a class-index map for softmax heads or the stacked binary
    region masks [N, R, ...] for sigmoid heads.
    """
    return compute_loss(logits, target, LossConfig("dice_plus_ce", cfg.class_set, cfg.smooth_eps), head_mode)


def compute_loss(logits: Tensor, target, cfg: LossConfig, head_mode: str = "softmax") -> Tensor:
    """Training loss selected by ``cfg.kind`` for the given head type."""
    target = np.asarray(target)
    if head_mode == "softmax":
        dice = lambda: dice_loss(
            T.softmax(logits, axis=1), one_hot(target, logits.shape[1], logits.dtype), cfg
        )
        ce = lambda: cross_entropy(logits, target)
    elif head_mode == "sigmoid":
        dice = lambda: region_dice_loss(T.sigmoid(logits), target, cfg)
        ce = lambda: binary_cross_entropy(logits, target)
    else:
        raise ValueError(f"unknown head_mode {head_mode!r}")
    if cfg.kind == "dice":
        return dice()
    if cfg.kind == "ce":
        return ce()
    return dice() + ce()
