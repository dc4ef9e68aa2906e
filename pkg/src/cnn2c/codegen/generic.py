"""Portable ANSI C layer emitters (no intrinsics, no library calls but exp)."""

from __future__ import annotations

from ..model import Conv2D, LeakyReLU, MaxPool2D, ReLU, Shape3
from .kernels import (
    ConvKernel,
    Fragment,
    Lane,
    conv_variant,
    elementwise_fragment,
    pool_fragment,
    softmax_fragment,
)
from .literals import format_float_literal
from .loops import UnrollLevel

FULL = UnrollLevel.full()


def emit_conv(layer: Conv2D, in_shape: Shape3, variant: int = 0, unroll: UnrollLevel = FULL,
              index: int = 0) -> Fragment:
    kernel = ConvKernel(index, layer, Shape3(*in_shape), conv_variant(variant), unroll, Lane())
    return kernel.fragment(f"l{index}")


def emit_maxpool(layer: MaxPool2D, in_shape: Shape3, unroll: UnrollLevel = FULL,
                 index: int = 0) -> Fragment:
    return pool_fragment(f"l{index}", layer, Shape3(*in_shape), unroll, Lane())


def relu_expr(v: str) -> str:
    return f"{v} > 0.0f ? {v} : 0.0f"


def leaky_relu_expr(alpha: float):
    a = format_float_literal(alpha)
    return lambda v: f"{v} > 0.0f ? {v} : {a}*{v}"


def emit_activation(layer: ReLU | LeakyReLU, shape: Shape3, unroll: UnrollLevel = FULL,
                    index: int = 0) -> Fragment:
    """ReLU / leaky ReLU as conditional expressions, never if-statements."""
    if isinstance(layer, LeakyReLU):
        expr = leaky_relu_expr(layer.alpha)
    elif isinstance(layer, ReLU):
        expr = relu_expr
    else:
        raise TypeError(f"not an activation layer: {layer!r}")
    return elementwise_fragment(f"l{index}", Shape3(*shape), unroll, Lane(), expr)


def emit_softmax(shape: Shape3, unroll: UnrollLevel = FULL, index: int = 0) -> Fragment:
    return softmax_fragment(f"l{index}", Shape3(*shape), unroll)
