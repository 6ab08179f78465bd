"""Learnable layer records and their forward dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DimensionError
from . import functional as F
from .tensor import Tensor

KINDS = ("conv2d", "conv1d-temporal", "linear", "batchnorm")


@dataclass
class LayerParams:
    """Weights, bias and hyper-parameters of one layer.

    ``hyper`` holds kernel extents, stride and padding for convolutions, and
    ``momentum``/``eps`` for batch normalization. Batch normalization keeps its
    scale in ``weight``, its shift in ``bias`` and running statistics in
    ``running_mean``/``running_var``.
    """

    kind: str
    weight: Tensor
    bias: Optional[Tensor]
    hyper: dict = field(default_factory=dict)
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        w = self.weight.shape
        expected_rank = {"conv2d": 4, "conv1d-temporal": 3, "linear": 2, "batchnorm": 1}[self.kind]
        if len(w) != expected_rank:
            raise DimensionError(f"{self.kind}: weight must have rank {expected_rank}, got {w}")
        if self.bias is not None and self.bias.shape != (w[0],):
            raise DimensionError(f"{self.kind}: bias shape {self.bias.shape} does not match {w[0]} outputs")
        if self.kind == "batchnorm":
            if self.bias is None:
                raise DimensionError("batchnorm: shift (bias) is required")
            c = w[0]
            if self.running_mean is None:
                self.running_mean = np.zeros(c, dtype=self.weight.dtype)
            if self.running_var is None:
                self.running_var = np.ones(c, dtype=self.weight.dtype)
            if self.running_mean.shape != (c,) or self.running_var.shape != (c,):
                raise DimensionError(f"batchnorm: running statistics must have length {c}")
            if np.any(self.running_var <= 0):
                raise ValueError("batchnorm: running variance must be positive")
            self.hyper.setdefault("momentum", 0.1)
            self.hyper.setdefault("eps", 1e-5)
        elif self.kind == "conv2d":
            self.hyper.setdefault("stride", 1)
            self.hyper.setdefault("padding", 0)
        elif self.kind == "conv1d-temporal":
            self.hyper.setdefault("padding", w[2] // 2)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def forward(layer: LayerParams, x: Tensor, training: bool = False) -> Tensor:
    if layer.kind == "conv2d":
        return F.conv2d(x, layer.weight, layer.bias, layer.hyper["stride"], layer.hyper["padding"])
    if layer.kind == "conv1d-temporal":
        return F.conv1d_temporal(x, layer.weight, layer.bias, layer.hyper["padding"])
    if layer.kind == "linear":
        return F.linear(x, layer.weight, layer.bias)
    return batchnorm_stats(x, layer, training)


def batchnorm_stats(x: Tensor, layer: LayerParams, training: bool) -> Tensor:
    return F.batch_norm(
        x,
        layer.weight,
        layer.bias,
        layer.running_mean,
        layer.running_var,
        training,
        momentum=layer.hyper["momentum"],
        eps=layer.hyper["eps"],
    )


# ---------------------------------------------------------------- constructors


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def conv2d_layer(
    in_channels: int,
    out_channels: int,
    kernel: int,
    rng: np.random.Generator,
    stride: int = 1,
    padding: int = 0,
    bias: bool = True,
    dtype=np.float32,
) -> LayerParams:
    fan_in = in_channels * kernel * kernel
    w = _kaiming(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
    b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
    return LayerParams("conv2d", w, b, {"stride": stride, "padding": padding})


def temporal_layer(
    channels: int,
    rng: np.random.Generator,
    kernel: int = 3,
    identity_init: bool = True,
    bias: bool = False,
    dtype=np.float32,
) -> LayerParams:
    """Channel-mixing 1D convolution over time with same-padding.

    With ``identity_init`` the centre tap is the identity matrix plus a small
    perturbation, so a freshly injected layer passes features through.
    """
    if identity_init:
        w = rng.standard_normal((channels, channels, kernel)) * (0.01 / np.sqrt(channels * kernel))
        w[:, :, kernel // 2] += np.eye(channels)
        weight = Tensor(w.astype(dtype), requires_grad=True)
    else:
        weight = _kaiming(rng, (channels, channels, kernel), channels * kernel, dtype)
    b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True) if bias else None
    return LayerParams("conv1d-temporal", weight, b, {"padding": kernel // 2})


def linear_layer(
    in_features: int,
    out_features: int,
    rng: np.random.Generator,
    bias: bool = True,
    gain: float = 2.0,
    dtype=np.float32,
) -> LayerParams:
    std = np.sqrt(gain / in_features)
    w = Tensor((rng.standard_normal((out_features, in_features)) * std).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None
    return LayerParams("linear", w, b)


def batchnorm_layer(channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32) -> LayerParams:
    return LayerParams(
        "batchnorm",
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        {"momentum": momentum, "eps": eps},
    )


def count_parameters(layers) -> int:
    return int(sum(p.size for layer in layers for p in layer.parameters()))
