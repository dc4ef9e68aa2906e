from .emit import Backend, CodegenConfig, CodegenError, CSourceFile, LayerChoice, emit_model
from .kernels import CONV_VARIANTS, ConvVariant, Fragment
from .literals import format_float_literal
from .loops import LoopPlan, UnrollLevel, plan_unroll

__all__ = [
    "Backend",
    "CONV_VARIANTS",
    "CSourceFile",
    "CodegenConfig",
    "CodegenError",
    "ConvVariant",
    "Fragment",
    "LayerChoice",
    "LoopPlan",
    "UnrollLevel",
    "emit_model",
    "format_float_literal",
    "plan_unroll",
]
