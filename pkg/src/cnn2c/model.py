"""CNN intermediate representation and static shape inference.

Tensors are plain float32 numpy arrays of shape ``(height, width, channels)``
(HWC, channel innermost). Layers are frozen dataclasses; a :class:`Model` is an
input shape plus an ordered tuple of layers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np


class ModelError(ValueError):
    """Base class for structural problems with a model."""


class ShapeError(ModelError):
    pass


class UnsupportedPatternError(ModelError):
    pass


class Shape3(NamedTuple):
    height: int
    width: int
    channels: int

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels

    def __str__(self) -> str:
        return f"{self.height}x{self.width}x{self.channels}"


class Padding(str, enum.Enum):
    SAME = "same"
    VALID = "valid"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class LeakyReLU:
    alpha: float
    kind = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(np.float32(self.alpha)))


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind = "dropout"


Activation = Union[ReLU, LeakyReLU, Softmax]


def _f32(a) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Conv2D:
    """Kernel is indexed ``(row, col, in_channel, out_channel)``."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding: Padding = Padding.VALID
    activation: Activation | None = None
    kind = "conv"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _f32(self.kernel))
        object.__setattr__(self, "bias", _f32(self.bias))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "padding", Padding(self.padding))
        if self.kernel.ndim != 4:
            raise ModelError(f"conv kernel must be 4-D, got shape {self.kernel.shape}")
        if self.bias.shape != (self.filters,):
            raise ModelError(
                f"conv bias length {self.bias.size} does not match {self.filters} filters"
            )
        if min(self.stride) < 1:
            raise ModelError(f"conv stride must be positive, got {self.stride}")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[0], self.kernel.shape[1]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def filters(self) -> int:
        return self.kernel.shape[3]

    @property
    def macs_per_output(self) -> int:
        kh, kw, cin, _ = self.kernel.shape
        return kh * kw * cin


@dataclass(frozen=True)
class MaxPool2D:
    window: tuple[int, int]
    stride: tuple[int, int] | None = None
    kind = "maxpool"

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        stride = self.window if self.stride is None else self.stride
        object.__setattr__(self, "stride", tuple(int(v) for v in stride))
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ModelError(f"pool window/stride must be >= 1: {self.window}, {self.stride}")


@dataclass(frozen=True, eq=False)
class BatchNorm:
    """Per-channel ``(x - mu) / sigma`` with optional ``gamma``/``beta``.

    ``sigma`` is the standard deviation with epsilon already folded in.
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    kind = "batchnorm"

    def __post_init__(self):
        object.__setattr__(self, "mu", _f32(self.mu))
        object.__setattr__(self, "sigma", _f32(self.sigma))
        if (self.gamma is None) != (self.beta is None):
            raise ModelError("batchnorm gamma and beta must be given together")
        if self.gamma is not None:
            object.__setattr__(self, "gamma", _f32(self.gamma))
            object.__setattr__(self, "beta", _f32(self.beta))
        n = self.mu.size
        for name in ("sigma", "gamma", "beta"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ModelError(f"batchnorm {name} has length {arr.size}, expected {n}")
        if not np.all(self.sigma > 0):
            raise ModelError("batchnorm sigma must be strictly positive")

    @property
    def affine(self) -> bool:
        return self.gamma is not None

    @property
    def channels(self) -> int:
        return self.mu.size


Layer = Union[Conv2D, MaxPool2D, ReLU, LeakyReLU, BatchNorm, Softmax, Dropout]


@dataclass(frozen=True, eq=False)
class Model:
    name: str
    input_shape: Shape3
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", Shape3(*(int(v) for v in self.input_shape)))
        object.__setattr__(self, "layers", tuple(self.layers))
        if min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be positive, got {self.input_shape}")

    @property
    def output_shape(self) -> Shape3:
        shapes = infer_shapes(self)
        return shapes[-1] if shapes else self.input_shape

    def replace_layers(self, layers) -> Model:
        return Model(self.name, self.input_shape, tuple(layers))

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)


def same_padding(in_extent: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero padding ``(before, after)`` for "same" convolution along one axis.

    The odd pixel, if any, goes after.
    """
    out = -(-in_extent // stride)
    total = max((out - 1) * stride + kernel - in_extent, 0)
    before = total // 2
    return before, total - before


def conv_padding(layer: Conv2D, shape: Shape3) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) padding of ``layer`` applied to ``shape``."""
    if layer.padding is Padding.VALID:
        return 0, 0, 0, 0
    kh, kw = layer.kernel_size
    top, bottom = same_padding(shape.height, kh, layer.stride[0])
    left, right = same_padding(shape.width, kw, layer.stride[1])
    return top, bottom, left, right


def layer_output_shape(layer, shape: Shape3) -> Shape3:
    if isinstance(layer, Conv2D):
        if layer.in_channels != shape.channels:
            raise ShapeError(
                f"conv expects {layer.in_channels} input channels, got {shape.channels}"
            )
        kh, kw = layer.kernel_size
        sh, sw = layer.stride
        if layer.padding is Padding.SAME:
            h, w = -(-shape.height // sh), -(-shape.width // sw)
        else:
            h = (shape.height - kh) // sh + 1 if shape.height >= kh else 0
            w = (shape.width - kw) // sw + 1 if shape.width >= kw else 0
        out = Shape3(h, w, layer.filters)
    elif isinstance(layer, MaxPool2D):
        (kh, kw), (sh, sw) = layer.window, layer.stride
        h = (shape.height - kh) // sh + 1 if shape.height >= kh else 0
        w = (shape.width - kw) // sw + 1 if shape.width >= kw else 0
        out = Shape3(h, w, shape.channels)
    elif isinstance(layer, BatchNorm):
        if layer.channels != shape.channels:
            raise ShapeError(
                f"batchnorm has {layer.channels} channels, input has {shape.channels}"
            )
        out = shape
    elif isinstance(layer, (ReLU, LeakyReLU, Softmax, Dropout)):
        out = shape
    else:
        raise ModelError(f"unknown layer type {type(layer).__name__}")
    if min(out) < 1:
        raise ShapeError(
            f"{layer.kind} layer produces non-positive output {tuple(out)} from input {shape}"
        )
    return out


def infer_shapes(model: Model) -> list[Shape3]:
    """Output shape of every layer, in order."""
    shapes = []
    shape = model.input_shape
    for index, layer in enumerate(model.layers):
        try:
            shape = layer_output_shape(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {index}: {exc}") from None
        shapes.append(shape)
    return shapes


def input_shapes(model: Model) -> list[Shape3]:
    """Input shape of every layer, in order."""
    return [model.input_shape, *infer_shapes(model)[:-1]][: len(model.layers)]


def parameter_count(layer) -> int:
    if isinstance(layer, Conv2D):
        return layer.kernel.size + layer.bias.size
    if isinstance(layer, BatchNorm):
        return layer.channels * (4 if layer.affine else 2)
    return 0
