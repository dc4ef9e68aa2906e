"""Whole-model emission: one C translation unit with a single entry point."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field

from .. import __version__
from ..model import Conv2D, LeakyReLU, MaxPool2D, Model, ReLU, Shape3, Softmax, infer_shapes, input_shapes
from ..passes import is_normalized
from . import generic, ssse3
from .kernels import PAD_BUFFER, Fragment
from .loops import UnrollLevel


class CodegenError(ValueError):
    pass


class Backend(str, enum.Enum):
    GENERIC = "generic"
    SSSE3 = "ssse3"


@dataclass(frozen=True)
class LayerChoice:
    """Per-layer override; ``None`` fields inherit from the config."""

    backend: Backend | None = None
    unroll: UnrollLevel | None = None
    variant: int | None = None


_C_KEYWORDS = frozenset(
    "auto break case char const continue default do double else enum extern float for goto "
    "if int long register return short signed sizeof static struct switch typedef union "
    "unsigned void volatile while main".split()
)


@dataclass(frozen=True)
class CodegenConfig:
    backend: Backend = Backend.GENERIC
    unroll: UnrollLevel = UnrollLevel.full()
    function_name: str = "cnn_infer"
    emit_test_harness: bool = False
    conv_variant: int = 0
    per_layer_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "backend", Backend(self.backend))
        name = self.function_name
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name) or name in _C_KEYWORDS:
            raise CodegenError(f"function name {name!r} is not a usable C identifier")
        if re.fullmatch(r"l\d+(_.*)?|s_.*|w\d+|b\d+|h_.*", name):
            raise CodegenError(f"function name {name!r} collides with generated identifiers")

    def choice(self, index: int) -> tuple[Backend, UnrollLevel, int]:
        o = self.per_layer_overrides.get(index, LayerChoice())
        return (
            Backend(o.backend) if o.backend is not None else self.backend,
            o.unroll if o.unroll is not None else self.unroll,
            o.variant if o.variant is not None else self.conv_variant,
        )


@dataclass(frozen=True)
class CSourceFile:
    text: str
    function_name: str
    input_shape: Shape3
    output_shape: Shape3
    includes: tuple[str, ...]
    backend: Backend
    has_harness: bool = False
    trace_layout: tuple[tuple[int, int], ...] = ()
    notes: tuple[str, ...] = ()

    @property
    def input_len(self) -> int:
        return self.input_shape.size

    @property
    def output_len(self) -> int:
        return self.output_shape.size

    @property
    def signature(self) -> str:
        return f"void {self.function_name}(const float *input, float *output)"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    @property
    def needs_libm(self) -> bool:
        return "math.h" in self.includes


# Vendor intrinsics are an extension; refuse strict-conformance builds with a
# readable message rather than relying on how lenient a compiler's headers are.
_ALIGN_MACRO = """#if defined(__STRICT_ANSI__)
#error "SSE intrinsics are not ANSI C: build without -std=c89/-ansi, e.g. -mssse3"
#endif
#if defined(_MSC_VER)
#define CNN2C_ALIGN16 __declspec(align(16))
#else
#define CNN2C_ALIGN16 __attribute__((aligned(16)))
#endif"""


def emit_layer(model_index: int, layer, in_shape: Shape3, backend: Backend, unroll: UnrollLevel,
               variant: int, x_aligned: bool, y_aligned: bool) -> Fragment:
    i = model_index
    if backend is Backend.SSSE3:
        verdict = ssse3.layer_eligibility(i, layer, in_shape)
        if verdict.eligible:
            kw = dict(unroll=unroll, index=i, x_aligned=x_aligned, y_aligned=y_aligned)
            if isinstance(layer, Conv2D):
                return ssse3.emit_conv_simd(layer, in_shape, variant, **kw)
            if isinstance(layer, MaxPool2D):
                return ssse3.emit_maxpool_simd(layer, in_shape, **kw)
            if isinstance(layer, LeakyReLU):
                return ssse3.emit_leaky_relu_simd(layer.alpha, in_shape, **kw)
            return ssse3.emit_relu_simd(in_shape, **kw)
        frag = emit_layer(i, layer, in_shape, Backend.GENERIC, unroll, variant, x_aligned, y_aligned)
        frag.note = f"layer {i} ({layer.kind}) uses generic code: {verdict.reason.value}"
        return frag
    if isinstance(layer, Conv2D):
        return generic.emit_conv(layer, in_shape, variant, unroll, i)
    if isinstance(layer, MaxPool2D):
        return generic.emit_maxpool(layer, in_shape, unroll, i)
    if isinstance(layer, (ReLU, LeakyReLU)):
        return generic.emit_activation(layer, in_shape, unroll, i)
    if isinstance(layer, Softmax):
        return generic.emit_softmax(in_shape, unroll, i)
    raise CodegenError(f"layer {i}: {layer.kind} cannot be emitted")


def _header(model: Model, config: CodegenConfig, out_shape: Shape3, includes, notes,
            simd: bool) -> list[str]:
    ins = model.input_shape
    if includes:
        deps = ", ".join(f"<{h}>" for h in includes)
        if "math.h" in includes:
            deps += "; link with -lm"
    else:
        deps = "none"
    lines = [
        "/*",
        f" * CNN inference of model '{model.name}', generated by cnn2c {__version__}.",
        " *",
        f" * void {config.function_name}(const float *input, float *output);",
        f" *   input : {ins} = {ins.size} floats, HWC order (channel fastest)",
        f" *   output: {out_shape} = {out_shape.size} floats, HWC order",
        " *",
        f" * Backend: {config.backend.value}. Default unroll level: {config.unroll}.",
        f" * Dependencies: {deps}.",
        " * Not reentrant: intermediate results live in static buffers; call from one",
        " * thread at a time.",
    ]
    if simd:
        lines.append(" * Build with SSE2 or better enabled, e.g. -mssse3 (gcc/clang).")
    else:
        lines.append(" * Portable C89: builds with any ANSI C compiler, e.g. cc -std=c89 -c.")
    for note in notes:
        lines.append(f" * Note: {note}.")
    lines.append(" */")
    return lines


def harness_main(fn: str, in_len: int, out_len: int, trace_calls=(), trace_len: int = 0,
                 aligned: bool = False) -> str:
    """``main`` for the raw-float verification transport and ``--bench R W`` timing."""
    al = "CNN2C_ALIGN16 " if aligned else ""
    lines = [
        f"static {al}float h_in[{in_len}];",
        f"static {al}float h_out[{out_len}];",
    ]
    if trace_calls:
        lines += [
            f"static {al}float h_trace[{trace_len}];",
            "",
            "static int run_trace(void)",
            "{",
            f"    if (fread(h_in, sizeof(float), {in_len}, stdin) != {in_len}) {{",
            '        fprintf(stderr, "trace: short read\\n");',
            "        return 3;",
            "    }",
            *("    " + call for call in trace_calls),
            f"    fwrite(h_trace, sizeof(float), {trace_len}, stdout);",
            "    return 0;",
            "}",
        ]
    lines += [
        "",
        "int main(int argc, char **argv)",
        "{",
        f"    void (*volatile fn)(const float *, float *) = {fn};",
        "    size_t got;",
        '    if (argc == 4 && strcmp(argv[1], "--bench") == 0) {',
        "        long reps = atol(argv[2]), warm = atol(argv[3]), r;",
        "        struct timespec t0, t1;",
        "        volatile float sink = 0.0f;",
        "        double ns;",
        "        size_t q;",
        "        if (reps <= 0 || warm < 0) {",
        '            fprintf(stderr, "usage: --bench REPS WARMUP (REPS >= 1)\\n");',
        "            return 2;",
        "        }",
        f"        for (q = 0; q < {in_len}; q++) {{",
        "            h_in[q] = (float)((long)(q % 17) - 8) / 8.0f;",
        "        }",
        "        for (r = 0; r < warm; r++) {",
        "            fn(h_in, h_out);",
        "        }",
        "        clock_gettime(CLOCK_MONOTONIC, &t0);",
        "        for (r = 0; r < reps; r++) {",
        "            fn(h_in, h_out);",
        "            sink = h_out[0];",
        "        }",
        "        clock_gettime(CLOCK_MONOTONIC, &t1);",
        "        (void)sink;",
        "        ns = (double)(t1.tv_sec - t0.tv_sec) * 1e9 + (double)(t1.tv_nsec - t0.tv_nsec);",
        '        printf("%.3f\\n", ns / (double)reps);',
        "        return 0;",
        "    }",
    ]
    if trace_calls:
        lines += [
            '    if (argc == 2 && strcmp(argv[1], "--trace") == 0) {',
            "        return run_trace();",
            "    }",
        ]
    lines += [
        f"    while ((got = fread(h_in, sizeof(float), {in_len}, stdin)) == {in_len}) {{",
        "        fn(h_in, h_out);",
        f"        if (fwrite(h_out, sizeof(float), {out_len}, stdout) != {out_len}) {{",
        "            return 3;",
        "        }",
        "    }",
        "    if (got != 0) {",
        f'        fprintf(stderr, "short read: %lu of {in_len} floats\\n", (unsigned long)got);',
        "        return 3;",
        "    }",
        "    return 0;",
        "}",
    ]
    return "\n".join(lines)


HARNESS_PRELUDE = [
    "#define _POSIX_C_SOURCE 199309L",
    "#include <stdio.h>",
    "#include <stdlib.h>",
    "#include <string.h>",
    "#include <time.h>",
]


def emit_model(model: Model, config: CodegenConfig = CodegenConfig()) -> CSourceFile:
    if not model.layers:
        raise CodegenError("empty model")
    if not is_normalized(model):
        raise CodegenError("model is not normalized (fold batch norms, erase dropout first)")
    out_shapes = infer_shapes(model)
    in_shapes = input_shapes(model)
    last = len(model.layers) - 1

    fragments: list[Fragment] = []
    for i, (layer, shape) in enumerate(zip(model.layers, in_shapes)):
        backend, unroll, variant = config.choice(i)
        fragments.append(
            emit_layer(i, layer, shape, backend, unroll, variant, x_aligned=i > 0, y_aligned=i < last)
        )

    simd = any(f.vectorized for f in fragments)
    includes = []
    if any(f.needs_math for f in fragments):
        includes.append("math.h")
    if simd:
        includes += ssse3.HEADERS
    notes = tuple(f.note for f in fragments if f.note)

    lines = _header(model, config, out_shapes[-1], includes, notes, simd)
    if config.emit_test_harness:
        lines += HARNESS_PRELUDE
    lines += [f"#include <{h}>" for h in includes]
    if simd:
        lines.append(_ALIGN_MACRO)
    lines.append("")

    al = "CNN2C_ALIGN16 " if simd else ""
    scratch = max((s.size for s in out_shapes[:-1]), default=0)
    pad = max((f.pad_floats for f in fragments), default=0)
    if scratch:
        lines.append(f"static {al}float s_buf0[{scratch}];")
        if last > 1:
            lines.append(f"static {al}float s_buf1[{scratch}];")
    if pad:
        lines.append(f"static {al}float {PAD_BUFFER}[{pad}];")

    for frag in fragments:
        lines += ["", frag.text]

    calls = []
    for i, frag in enumerate(fragments):
        src = "input" if i == 0 else f"s_buf{(i - 1) % 2}"
        dst = "output" if i == last else f"s_buf{i % 2}"
        calls.append(f"    {frag.name}({src}, {dst});")
    lines += ["", f"void {config.function_name}(const float *input, float *output)", "{", *calls, "}"]

    layout: list[tuple[int, int]] = []
    if config.emit_test_harness:
        offset, trace_calls = 0, []
        for i, (frag, shape) in enumerate(zip(fragments, out_shapes)):
            src = "h_in" if i == 0 else f"h_trace + {layout[-1][0]}"
            trace_calls.append(f"{frag.name}({src}, h_trace + {offset});")
            layout.append((offset, shape.size))
            offset += -(-shape.size // 4) * 4
        lines += [
            "",
            harness_main(config.function_name, model.input_shape.size, out_shapes[-1].size,
                         trace_calls, offset, aligned=simd),
        ]

    return CSourceFile(
        text="\n".join(lines) + "\n",
        function_name=config.function_name,
        input_shape=model.input_shape,
        output_shape=out_shapes[-1],
        includes=tuple(includes),
        backend=config.backend,
        has_harness=config.emit_test_harness,
        trace_layout=tuple(layout),
        notes=notes,
    )


def include_directives(text: str) -> list[str]:
    return re.findall(r"^\s*#\s*include\s*[<\"]([^>\"]+)[>\"]", text, flags=re.M)
