"""Layers and the configurable 3D U-Net with one 1x1x1 head per dataset."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor, make_result


@dataclass
class ModelConfig:
    in_channels: int = 4
    base_features: int = 30
    depth: int = 5
    num_classes: int = 4
    num_regions: int = 3
    head_mode: str = "softmax"
    leakiness: float = 1e-2
    num_heads: int = 1
    norm_eps: float = 1e-5
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.base_features < 1:
            raise ValueError("base_features must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.head_mode not in ("softmax", "sigmoid"):
            raise ValueError(f"head_mode must be 'softmax' or 'sigmoid', got {self.head_mode!r}")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def out_channels(self) -> int:
        """Channels of each head: classes for softmax, regions for sigmoid."""
        return self.num_classes if self.head_mode == "softmax" else self.num_regions

    @property
    def features(self) -> List[int]:
        return [self.base_features * 2 ** level for level in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over spatial axes plus affine."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects [N, C, *spatial], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta must have shape ({c},)")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    if count < 2:
        raise ShapeError(f"instance_norm needs more than one spatial voxel, got {x.shape[2:]}")
    bshape = (1, c) + (1,) * len(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g = gamma.data.reshape(bshape)
    out = xhat * g + beta.data.reshape(bshape)

    def backward(grad):
        ggamma = (grad * xhat).sum(axis=(0,) + axes) if gamma.requires_grad else None
        gbeta = grad.sum(axis=(0,) + axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = grad * g
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


class UNet:
    """3D U-Net: conv-IN-lReLU pairs, max-pool down, reduce + trilinear up.

    Parameters live in ``self.params`` (ordered, named). The encoder/decoder
    trunk is shared by all heads; head ``k`` is a single 1x1x1 convolution.
    """

    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.params = params

    # -- parameter access -----------------------------------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def head_parameter_names(self, head_index: int) -> List[str]:
        return [f"head{head_index}.w", f"head{head_index}.b"]

    def trunk_parameter_names(self) -> List[str]:
        return [n for n in self.params if not n.startswith("head")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    # -- forward --------------------------------------------------------------
    def _conv_block(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        x = T.conv3d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], padding="same")
        x = instance_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], self.cfg.norm_eps)
        return T.leaky_relu(x, self.cfg.leakiness)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected input [N, {self.cfg.in_channels}, D, H, W], got {x.shape}"
            )
        div = self.cfg.divisor
        if any(s % div for s in x.shape[2:]):
            raise ShapeError(
                f"spatial shape {x.shape[2:]} not divisible by 2^(depth-1) = {div}"
            )

    def trunk(self, x) -> Tensor:
        """Shared encoder/decoder features at full resolution."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.dtype))
        self.check_input(x)
        p = self.params
        skips = []
        for level in range(self.cfg.depth):
            if level > 0:
                x = T.maxpool3d(x, 2)
            x = self._conv_block(x, f"enc{level}.conv0")
            x = self._conv_block(x, f"enc{level}.conv1")
            skips.append(x)
        for level in reversed(range(self.cfg.depth - 1)):
            x = T.conv3d(x, p[f"dec{level}.reduce.w"], p[f"dec{level}.reduce.b"], padding=0)
            x = T.upsample_trilinear(x, 2)
            x = T.concat([skips[level], x], axis=1)
            x = self._conv_block(x, f"dec{level}.conv0")
            x = self._conv_block(x, f"dec{level}.conv1")
        return x

    def head(self, features: Tensor, head_index: int = 0) -> Tensor:
        if not 0 <= head_index < self.cfg.num_heads:
            raise IndexError(f"head_index {head_index} out of range for {self.cfg.num_heads} heads")
        p = self.params
        return T.conv3d(features, p[f"head{head_index}.w"], p[f"head{head_index}.b"], padding=0)

    def forward(self, x, head_index: int = 0) -> Tensor:
        if not 0 <= head_index < self.cfg.num_heads:
            raise IndexError(f"head_index {head_index} out of range for {self.cfg.num_heads} heads")
        return self.head(self.trunk(x), head_index)

    __call__ = forward

    def probabilities(self, logits: Tensor) -> Tensor:
        if self.cfg.head_mode == "softmax":
            return T.softmax(logits, axis=1)
        return T.sigmoid(logits)


def _kaiming_uniform(rng, shape, leakiness, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / ((1.0 + leakiness ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_unet(cfg: ModelConfig, seed: Optional[int] = None) -> UNet:
    """Instantiate all parameters of the U-Net described by ``cfg``.

    Parameter count and names depend only on ``cfg``; values depend on the
    seed (``cfg.init_seed`` unless overridden), so two builds with the same seed are
    bit-identical.
    """
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    dtype = np.dtype(cfg.dtype)
    params: "OrderedDict[str, Tensor]" = OrderedDict()

    def conv(name, cin, cout, k):
        params[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin, k, k, k), cfg.leakiness, dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)

    def block(name, cin, cout):
        conv(name, cin, cout, 3)
        params[f"{name}.gamma"] = np.ones(cout, dtype=dtype)
        params[f"{name}.beta"] = np.zeros(cout, dtype=dtype)

    feats = cfg.features
    cin = cfg.in_channels
    for level, f in enumerate(feats):
        block(f"enc{level}.conv0", cin, f)
        block(f"enc{level}.conv1", f, f)
        cin = f
    for level in reversed(range(cfg.depth - 1)):
        f = feats[level]
        conv(f"dec{level}.reduce", feats[level + 1], f, 1)
        block(f"dec{level}.conv0", 2 * f, f)
        block(f"dec{level}.conv1", f, f)
    for h in range(cfg.num_heads):
        conv(f"head{h}", feats[0], cfg.out_channels, 1)

    tensors = OrderedDict()
    for name, arr in params.items():
        t = Tensor(arr, requires_grad=True)
        t.name = name
        tensors[name] = t
    return UNet(cfg, tensors)


def forward(net: UNet, x, head_index: int = 0) -> Tensor:
    return net.forward(x, head_index)
