"""Command line front end: compile, run, verify, bench, autotune, inspect.

Exit status is 0 on success, 1 when a check fails or the work cannot be
done, and 2 for usage errors. Machine-readable results go to stdout and all
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, harness, interpreter, zoo
from .codegen import Backend, CodegenConfig, CodegenError, UnrollLevel, emit_model
from .codegen.kernels import CONV_VARIANTS
from .codegen.ssse3 import classify_layers
from .model import BatchNorm, Conv2D, Dropout, LeakyReLU, MaxPool2D, Model, ModelError, infer_shapes, parameter_count
from .modelio import load_model
from .passes import normalize

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _unroll(text: str) -> UnrollLevel:
    try:
        return UnrollLevel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("manifest", nargs="?", help="model manifest (JSON)")
    p.add_argument("weights", nargs="?", help="raw little-endian float32 weights blob")
    p.add_argument("--zoo", choices=sorted(zoo.ARCHITECTURES),
                   help="use a bundled architecture with seeded random weights instead of files")
    p.add_argument("--zoo-seed", type=int, default=0, help="weight seed for --zoo (default 0)")


def _add_codegen_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=[b.value for b in Backend], default="generic")
    p.add_argument("--unroll", type=_unroll, default=UnrollLevel.full(),
                   help="none | full | outer:N (default full)")
    p.add_argument("--variant", type=int, choices=sorted(v.id for v in CONV_VARIANTS), default=0,
                   help="convolution schedule (default 0)")


def _add_compiler_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cc", help="C compiler (default: $CNN2C_CC, then $CC, then cc)")
    p.add_argument("--cflags", default="", help="extra compiler flags, space separated")
    p.add_argument("--target-flags", default="", help="cross-compilation flags, e.g. '-m32 -static'")
    p.add_argument("--opt", help="override the optimization flag of the profile, e.g. -O1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnn2c", description="Compile small CNNs to dependency-free C.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("compile", help="emit a C source file")
    _add_model_args(p)
    _add_codegen_args(p)
    p.add_argument("-o", "--out", required=True, help="output .c path ('-' for stdout)")
    p.add_argument("--function-name", default="cnn_infer")
    p.add_argument("--emit-harness", action="store_true", help="append the test/benchmark main()")

    p = sub.add_parser("run", help="run the reference interpreter on a raw float32 input file")
    _add_model_args(p)
    p.add_argument("--input", required=True, help="raw float32 input tensor (HWC)")
    p.add_argument("--trace", action="store_true", help="also print each layer's output shape")

    p = sub.add_parser("verify", help="compile generated code and compare it with the interpreter")
    _add_model_args(p)
    _add_codegen_args(p)
    _add_compiler_args(p)
    p.add_argument("-n", "--inputs", type=_positive, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None,
                   help="max-abs tolerance; 0 demands bit-exactness (default 0 generic, 1e-5 ssse3)")

    p = sub.add_parser("bench", help="time generated code")
    _add_model_args(p)
    _add_codegen_args(p)
    _add_compiler_args(p)
    p.add_argument("--reps", type=_positive, default=None,
                   help="calls per sample (default scales with model cost)")
    p.add_argument("--samples", type=_positive, default=5)
    p.add_argument("--no-overhead", action="store_true", help="do not subtract the empty-call cost")

    p = sub.add_parser("autotune", help="choose a code version per layer by measurement")
    _add_model_args(p)
    _add_compiler_args(p)
    p.add_argument("-o", "--out", required=True, help="tuned .c output path")
    p.add_argument("--space", choices=["small", "full"], default="small",
                   help="small: generic/none, generic/full, ssse3/full; full: every backend, "
                        "unroll level and variant")
    p.add_argument("--reps", type=_positive, default=None)
    p.add_argument("--samples", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--function-name", default="cnn_infer")

    p = sub.add_parser("inspect", help="print the layer table, SIMD eligibility and parameter counts")
    _add_model_args(p)
    return parser


def _load(args) -> Model:
    files = args.manifest is not None or args.weights is not None
    if args.zoo and files:
        raise UsageError("give either MANIFEST WEIGHTS or --zoo, not both")
    if args.zoo:
        return zoo.build(args.zoo, args.zoo_seed)
    if args.manifest is None or args.weights is None:
        raise UsageError("MANIFEST and WEIGHTS are required unless --zoo is given")
    return load_model(args.manifest, args.weights)


def _config(args, **kw) -> CodegenConfig:
    return CodegenConfig(backend=Backend(args.arch), unroll=args.unroll, conv_variant=args.variant, **kw)


def _spec(args, backend: Backend) -> harness.CompilerSpec:
    spec = harness.CompilerSpec.for_backend(
        backend, args.cc, flags=tuple(args.cflags.split()), target_flags=tuple(args.target_flags.split()),
        opt_level=args.opt,
    )
    spec.probe()
    return spec


def _err(*parts) -> None:
    print(*parts, file=sys.stderr)


def cmd_compile(args) -> int:
    model = normalize(_load(args))
    source = emit_model(model, _config(args, function_name=args.function_name,
                                       emit_test_harness=args.emit_harness))
    if args.out == "-":
        sys.stdout.write(source.text)
    else:
        Path(args.out).write_text(source.text)
    deps = ", ".join(source.includes) if source.includes else "none"
    _err(f"wrote {args.out}: {source.signature}; input {source.input_shape}, output {source.output_shape}")
    _err(f"include dependencies: {deps}" + ("; link with -lm" if source.needs_libm else ""))
    for note in source.notes:
        _err(f"note: {note}")
    return EXIT_OK


def cmd_run(args) -> int:
    model = normalize(_load(args))
    raw = Path(args.input).read_bytes()
    want = model.input_shape.size * 4
    if len(raw) != want:
        _err(f"error: input file has {len(raw)} bytes, model input {model.input_shape} needs {want}")
        return EXIT_FAIL
    x = np.frombuffer(raw, dtype="<f4").reshape(model.input_shape)
    if args.trace:
        trace = interpreter.run_traced(model, x)
        for i, (layer, y) in enumerate(zip(model.layers, trace)):
            print(f"# layer {i} {layer.kind} {'x'.join(map(str, y.shape))}")
        y = trace[-1]
    else:
        y = interpreter.run(model, x)
    for v in y.ravel():
        print(f"{float(v):.9g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = _load(args)
    backend = Backend(args.arch)
    tol = args.tol if args.tol is not None else (1e-5 if backend is Backend.SSSE3 else 0.0)
    report = harness.verify(model, _config(args), _spec(args, backend), args.inputs, args.seed, tol)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    model = normalize(_load(args))
    backend = Backend(args.arch)
    spec = _spec(args, backend)
    source = emit_model(model, _config(args, emit_test_harness=True))
    reps = args.reps or harness.default_repetitions(model)
    t = harness.time_source(source, spec, reps, args.samples, subtract_overhead=not args.no_overhead)
    print(f"model={model.name} backend={backend.value} unroll={args.unroll} variant={args.variant} "
          f"reps={t.repetitions} samples={len(t.samples_ns)} median_ns={t.median:.1f} "
          f"mean_ns={t.mean:.1f} min_ns={t.min:.1f} overhead_ns={t.overhead_ns:.1f}")
    return EXIT_OK


def cmd_autotune(args) -> int:
    model = normalize(_load(args))
    base = _spec(args, Backend.GENERIC)

    def spec_for(backend):
        return replace(base, profile="native-simd") if Backend(backend) is Backend.SSSE3 else base

    space = harness.DEFAULT_SPACE if args.space == "small" else (lambda i, layer: harness.variant_space(layer))
    report = harness.autotune(model, spec_for, space, seed=args.seed, repetitions=args.reps,
                              samples=args.samples)
    config = report.config(CodegenConfig(function_name=args.function_name))
    Path(args.out).write_text(emit_model(model, config).text)
    for lt in report.layers:
        for m in lt.measurements:
            mark = "*" if m.candidate_id == lt.chosen else " "
            timing = f"{m.median_ns:.1f}" if m.median_ns is not None else f"rejected ({m.error})"
            print(f"{mark} layer {lt.index:2d} {lt.kind:<10} {m.candidate_id:2d} {m.candidate!s:<24} {timing}")
    if report.total_before_ns is not None:
        print(f"total_before_ns={report.total_before_ns:.1f} total_after_ns={report.total_after_ns:.1f}")
    _err(f"wrote {args.out}; {report.final.summary()}")
    return EXIT_OK


def _describe(layer) -> tuple[str, str]:
    if isinstance(layer, Conv2D):
        kh, kw = layer.kernel_size
        act = f", {layer.activation.kind}" if layer.activation is not None else ""
        return "Convolution", (f"{layer.filters} filters {kh}x{kw}, stride {layer.stride[0]}x{layer.stride[1]}, "
                               f"{layer.padding.value}{act}")
    if isinstance(layer, MaxPool2D):
        return "Max-Pooling", f"{layer.window[0]}x{layer.window[1]}, stride {layer.stride[0]}x{layer.stride[1]}"
    if isinstance(layer, LeakyReLU):
        return "Leaky-ReLU", f"alpha {layer.alpha:g}"
    if isinstance(layer, BatchNorm):
        return "Batch-Norm", "affine" if layer.affine else ""
    if isinstance(layer, Dropout):
        return "Dropout", f"{layer.rate:g}"
    return {"relu": "ReLU", "softmax": "Softmax"}[layer.kind], ""


def cmd_inspect(args) -> int:
    raw = _load(args)
    model = normalize(raw)
    print(f"model {raw.name}: input {raw.input_shape}")
    print(f"{'#':>3}  {'Layer':<12} {'Parameters':<42} {'Output':<10} {'Weights':>7}")
    for i, (layer, shape) in enumerate(zip(raw.layers, infer_shapes(raw))):
        kind, params = _describe(layer)
        print(f"{i:>3}  {kind:<12} {params:<42} {str(shape):<10} {parameter_count(layer):>7}")
    print(f"total weights: {sum(parameter_count(l) for l in raw.layers)}")
    print()
    print(f"after normalization ({len(model.layers)} layers); SSSE3 eligibility:")
    for v in classify_layers(model):
        flag = "yes" if v.eligible else "no"
        print(f"{v.index:>3}  {v.kind:<12} channels={v.channels:<4} simd={flag:<4} {v.reason.value}")
    return EXIT_OK


COMMANDS = {
    "compile": cmd_compile,
    "run": cmd_run,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "autotune": cmd_autotune,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 for --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(f"cnn2c {args.command}: error: {exc}")
        return EXIT_USAGE
    except (ModelError, CodegenError, harness.HarnessError, OSError, ValueError) as exc:
        _err(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
