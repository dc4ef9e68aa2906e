"""x86 SSE backend: 4-wide packed-single arithmetic across channels.

Only packed-single SSE/SSE2 instructions are emitted (``_mm_*_ps``); the
backend keeps the historical "ssse3" name. Layers whose channel count is not
a multiple of four are left to the generic emitters by the model emitter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..model import Conv2D, LeakyReLU, MaxPool2D, Model, ReLU, Shape3, input_shapes
from .kernels import ConvKernel, Fragment, VectorLane, conv_variant, elementwise_fragment, pool_fragment
from .literals import format_float_literal
from .loops import UnrollLevel

LANES = 4
HEADERS = ("emmintrin.h",)


class Reason(str, enum.Enum):
    ELIGIBLE = "eligible"
    CHANNELS = "channels-not-multiple-of-4"
    KIND = "layer-kind-unsupported"


@dataclass(frozen=True)
class SimdEligibility:
    index: int
    kind: str
    channels: int
    reason: Reason

    @property
    def eligible(self) -> bool:
        return self.reason is Reason.ELIGIBLE


class SimdContractError(ValueError):
    pass


def layer_eligibility(index: int, layer, in_shape: Shape3) -> SimdEligibility:
    if isinstance(layer, Conv2D):
        channels = layer.filters
    elif isinstance(layer, (MaxPool2D, ReLU, LeakyReLU)):
        channels = in_shape.channels
    else:
        return SimdEligibility(index, layer.kind, in_shape.channels, Reason.KIND)
    if isinstance(layer, LeakyReLU) and not layer.alpha < 1:
        return SimdEligibility(index, layer.kind, channels, Reason.KIND)
    reason = Reason.ELIGIBLE if channels % LANES == 0 else Reason.CHANNELS
    return SimdEligibility(index, layer.kind, channels, reason)


def classify_layers(model: Model) -> list[SimdEligibility]:
    return [
        layer_eligibility(i, layer, shape)
        for i, (layer, shape) in enumerate(zip(model.layers, input_shapes(model)))
    ]


def _require(layer, in_shape: Shape3):
    verdict = layer_eligibility(0, layer, Shape3(*in_shape))
    if not verdict.eligible:
        raise SimdContractError(f"{layer.kind} layer is not SIMD-eligible: {verdict.reason.value}")


def emit_conv_simd(layer: Conv2D, in_shape: Shape3, variant: int = 0,
                   unroll: UnrollLevel = UnrollLevel.full(), index: int = 0,
                   x_aligned: bool = True, y_aligned: bool = True) -> Fragment:
    _require(layer, in_shape)
    lane = VectorLane(x_aligned, y_aligned)
    kernel = ConvKernel(index, layer, Shape3(*in_shape), conv_variant(variant), unroll, lane)
    return kernel.fragment(f"l{index}")


def emit_maxpool_simd(layer: MaxPool2D, in_shape: Shape3,
                      unroll: UnrollLevel = UnrollLevel.full(), index: int = 0,
                      x_aligned: bool = True, y_aligned: bool = True) -> Fragment:
    _require(layer, in_shape)
    return pool_fragment(f"l{index}", layer, Shape3(*in_shape), unroll,
                         VectorLane(x_aligned, y_aligned))


def emit_leaky_relu_simd(alpha: float, shape: Shape3, unroll: UnrollLevel = UnrollLevel.full(),
                         index: int = 0, x_aligned: bool = True,
                         y_aligned: bool = True) -> Fragment:
    """``max(x, alpha*x)``, equal to the leaky ReLU for any ``alpha < 1``."""
    if not alpha < 1:
        raise SimdContractError(f"max(x, alpha*x) needs alpha < 1, got {alpha}")
    _require(LeakyReLU(alpha), shape)
    a = format_float_literal(alpha)

    def expr(v: str) -> str:
        return f"_mm_max_ps({v}, _mm_mul_ps({v}, _mm_set1_ps({a})))"

    return elementwise_fragment(f"l{index}", Shape3(*shape), unroll,
                                VectorLane(x_aligned, y_aligned), expr)


def emit_relu_simd(shape: Shape3, unroll: UnrollLevel = UnrollLevel.full(), index: int = 0,
                   x_aligned: bool = True, y_aligned: bool = True) -> Fragment:
    _require(ReLU(), shape)

    def expr(v: str) -> str:
        return f"_mm_max_ps({v}, _mm_setzero_ps())"

    return elementwise_fragment(f"l{index}", Shape3(*shape), unroll,
                                VectorLane(x_aligned, y_aligned), expr)
