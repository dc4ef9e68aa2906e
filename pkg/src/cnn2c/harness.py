"""Build generated sources with an external C compiler, verify them, time them.

The generated test harness ``main`` speaks a raw float32 protocol: input
tensors are written to stdin back to back and each produces one output tensor
on stdout. ``--bench R W`` prints nanoseconds per inference and ``--trace``
dumps every layer output for one input.
"""

from __future__ import annotations

import os
import resource
import shutil
import statistics
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import interpreter
from .codegen.emit import (
    HARNESS_PRELUDE,
    Backend,
    CodegenConfig,
    CSourceFile,
    LayerChoice,
    emit_model,
    harness_main,
)
from .codegen.loops import UnrollLevel
from .model import Conv2D, Model, Shape3, infer_shapes, input_shapes
from .passes import normalize

FLOAT = np.dtype("<f4")


class HarnessError(RuntimeError):
    pass


class CompilerNotFound(HarnessError):
    pass


class CompilerError(HarnessError):
    def __init__(self, message: str, diagnostics: str, command: Sequence[str]):
        super().__init__(f"{message}\n{diagnostics}".rstrip())
        self.diagnostics = diagnostics
        self.command = list(command)


class TransportError(HarnessError):
    def __init__(self, message: str, expected_bytes: int | None = None,
                 actual_bytes: int | None = None):
        super().__init__(message)
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes


# --- compiler specs -------------------------------------------------------

PROFILES = {
    "ansi-strict": ("-std=c89", "-pedantic-errors", "-Wall", "-O2", "-ffp-contract=off"),
    "native-simd": ("-O2", "-mssse3", "-Wall", "-ffp-contract=off"),
}


def default_compiler() -> str:
    return os.environ.get("CNN2C_CC") or os.environ.get("CC") or "cc"


@dataclass(frozen=True)
class CompilerSpec:
    """An external C compiler plus flags.

    ``target_flags`` carries cross-compilation switches (``-m32``,
    ``-static``, ``--target=...``) separately from the conformance profile.
    ``memory_limit`` caps the compiler's address space in bytes, so that a
    fully unrolled large network fails with a diagnostic instead of waking
    the kernel's OOM killer.
    """

    executable: str = field(default_factory=default_compiler)
    profile: str = "ansi-strict"
    flags: tuple[str, ...] = ()
    target_flags: tuple[str, ...] = ()
    opt_level: str | None = None
    memory_limit: int | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")

    @classmethod
    def for_backend(cls, backend: Backend, executable: str | None = None, **kw) -> "CompilerSpec":
        profile = "native-simd" if Backend(backend) is Backend.SSSE3 else "ansi-strict"
        return cls(executable=executable or default_compiler(), profile=profile, **kw)

    def command_flags(self) -> list[str]:
        out = list(PROFILES[self.profile])
        if self.opt_level is not None:
            out = [f for f in out if not f.startswith("-O")] + [self.opt_level]
        return out + list(self.flags) + list(self.target_flags)

    def resolve(self) -> str:
        path = shutil.which(self.executable)
        if path is None:
            raise CompilerNotFound(f"C compiler {self.executable!r} not found")
        return path

    def probe(self) -> str:
        """First line of ``--version``; raises CompilerNotFound when unusable."""
        exe = self.resolve()
        try:
            r = subprocess.run([exe, "--version"], capture_output=True, text=True, timeout=30)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise CompilerNotFound(f"C compiler {exe!r} did not answer a version probe: {exc}")
        if r.returncode != 0:
            raise CompilerNotFound(f"C compiler {exe!r} failed its version probe:\n{r.stderr}")
        return (r.stdout or r.stderr).splitlines()[0] if (r.stdout or r.stderr) else exe


@dataclass(frozen=True)
class Artifact:
    path: Path
    diagnostics: str
    command: tuple[str, ...]
    is_executable: bool


def compile(source: CSourceFile | str, spec: CompilerSpec, out: str | Path | None = None,
            workdir: str | Path | None = None, timeout: float = 1800) -> Artifact:
    """Compile to an executable (harness sources) or an object file."""
    exe = spec.resolve()
    text = source.text if isinstance(source, CSourceFile) else source
    link = source.has_harness if isinstance(source, CSourceFile) else "int main" in text
    work = Path(workdir or tempfile.mkdtemp(prefix="cnn2c-"))
    work.mkdir(parents=True, exist_ok=True)
    c_path = work / "model.c"
    c_path.write_text(text)
    target = Path(out) if out else work / ("model" if link else "model.o")
    cmd = [exe, *spec.command_flags()]
    cmd += [str(c_path), "-o", str(target)] if link else ["-c", str(c_path), "-o", str(target)]
    if link:
        cmd.append("-lm")
    limit = spec.memory_limit

    def cap():
        resource.setrlimit(resource.RLIMIT_AS, (limit, limit))

    try:
        r = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout,
                           preexec_fn=cap if limit else None)
    except subprocess.TimeoutExpired:
        raise CompilerError(f"compiler timed out after {timeout:.0f} s", "", cmd)
    if r.returncode != 0:
        raise CompilerError(f"compiler exited with status {r.returncode}", r.stderr, cmd)
    return Artifact(target, r.stderr, tuple(cmd), link)


# --- inputs -----------------------------------------------------------------

XORSHIFT_NAME = "xorshift32(13,17,5)"


def xorshift_inputs(shape: Shape3, count: int, seed: int) -> np.ndarray:
    """``count`` tensors with entries uniform in [-1, 1).

    Marsaglia's 32-bit xorshift; each draw maps the top 24 bits to
    ``u / 2**23 - 1``, which is exact in float32. A zero seed is replaced by
    a fixed non-zero constant because xorshift has a zero fixed point.
    """
    n = count * Shape3(*shape).size
    state = (seed & 0xFFFFFFFF) or 0x9E3779B9
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        state ^= (state << 13) & 0xFFFFFFFF
        state ^= state >> 17
        state ^= (state << 5) & 0xFFFFFFFF
        out[i] = (state >> 8) / 8388608.0 - 1.0
    return out.reshape((count,) + tuple(shape))


# --- running binaries ------------------------------------------------------

def run_binary(binary: str | Path, inputs: np.ndarray, out_len: int, timeout: float = 600) -> np.ndarray:
    data = np.ascontiguousarray(inputs, dtype=FLOAT).tobytes()
    count = inputs.shape[0]
    try:
        r = subprocess.run([str(binary)], input=data, capture_output=True, timeout=timeout)
    except subprocess.TimeoutExpired:
        raise TransportError(f"{binary} timed out after {timeout:.0f} s")
    expected = count * out_len * 4
    if r.returncode != 0:
        raise TransportError(
            f"{binary} exited with status {r.returncode} after writing {len(r.stdout)} of "
            f"{expected} bytes: {r.stderr.decode(errors='replace').strip()}",
            expected, len(r.stdout),
        )
    if len(r.stdout) != expected:
        raise TransportError(f"short read from {binary}: {len(r.stdout)} of {expected} bytes",
                             expected, len(r.stdout))
    return np.frombuffer(r.stdout, dtype=FLOAT).reshape(count, out_len)


def trace_binary(binary: str | Path, source: CSourceFile, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer outputs from the harness ``--trace`` mode."""
    total = source.trace_layout[-1][0] + source.trace_layout[-1][1]
    padded = -(-total // 4) * 4
    r = subprocess.run([str(binary), "--trace"], input=np.asarray(x, FLOAT).tobytes(),
                       capture_output=True, timeout=600)
    if r.returncode != 0 or len(r.stdout) != padded * 4:
        raise TransportError(f"trace run failed: status {r.returncode}, {len(r.stdout)} of "
                             f"{padded * 4} bytes", padded * 4, len(r.stdout))
    flat = np.frombuffer(r.stdout, dtype=FLOAT)
    return [flat[o:o + n] for o, n in source.trace_layout]


# --- verification ----------------------------------------------------------

@dataclass(frozen=True)
class LayerDiff:
    index: int
    kind: str
    max_abs: float


@dataclass(frozen=True)
class VerificationReport:
    model_name: str
    backend: str
    unroll: str
    tolerance: float
    seed: int
    generator: str
    max_abs: tuple[float, ...]
    max_rel: tuple[float, ...]
    bit_exact: bool
    first_bad_layer: LayerDiff | None = None

    @property
    def n_inputs(self) -> int:
        return len(self.max_abs)

    @property
    def worst_abs(self) -> float:
        return max(self.max_abs, default=0.0)

    @property
    def worst_rel(self) -> float:
        return max(self.max_rel, default=0.0)

    @property
    def passed(self) -> bool:
        if self.tolerance == 0:
            return self.bit_exact
        return all(e <= self.tolerance for e in self.max_abs)

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        line = (f"{verdict} {self.model_name} backend={self.backend} unroll={self.unroll} "
                f"n={self.n_inputs} max_abs={self.worst_abs:.3g} max_rel={self.worst_rel:.3g} "
                f"bit_exact={self.bit_exact} tol={self.tolerance:g}")
        if self.first_bad_layer is not None:
            b = self.first_bad_layer
            line += f" first_bad_layer={b.index}({b.kind}) layer_max_abs={b.max_abs:.3g}"
        return line


def compare(reference: np.ndarray, got: np.ndarray) -> tuple[list[float], list[float], bool]:
    ref = reference.reshape(got.shape).astype(np.float32)
    diff = np.abs(ref.astype(np.float64) - got.astype(np.float64))
    scale = np.maximum(np.abs(ref.astype(np.float64)), np.finfo(np.float32).tiny)
    exact = np.array_equal(ref.view(np.uint32), got.view(np.uint32))
    return diff.max(axis=1).tolist(), (diff / scale).max(axis=1).tolist(), bool(exact)


def localize(model: Model, source: CSourceFile, binary: str | Path, x: np.ndarray,
             tolerance: float) -> LayerDiff | None:
    """First layer whose traced output differs from the interpreter's."""
    ours = trace_binary(binary, source, x)
    theirs = interpreter.run_traced(model, x)
    for i, (a, b) in enumerate(zip(ours, theirs)):
        b = np.asarray(b, np.float32).ravel()
        err = float(np.max(np.abs(a.astype(np.float64) - b)))
        bad = err > tolerance if tolerance > 0 else not np.array_equal(a.view(np.uint32), b.view(np.uint32))
        if bad:
            return LayerDiff(i, model.layers[i].kind, err)
    return None


def verify_source(model: Model, source: CSourceFile, spec: CompilerSpec, n_inputs: int = 100,
                  seed: int = 0, tolerance: float = 0.0, workdir=None, unroll: str = "") -> VerificationReport:
    if not source.has_harness:
        raise HarnessError("verification needs a source emitted with emit_test_harness=True")
    art = compile(source, spec, workdir=workdir)
    xs = xorshift_inputs(model.input_shape, n_inputs, seed)
    got = run_binary(art.path, xs, source.output_len)
    ref = np.stack([interpreter.run(model, x).ravel() for x in xs])
    max_abs, max_rel, exact = compare(ref, got)
    report = VerificationReport(model.name, source.backend.value, unroll, tolerance, seed,
                                XORSHIFT_NAME, tuple(max_abs), tuple(max_rel), exact)
    if not report.passed:
        worst = int(np.argmax(max_abs))
        report = replace(report, first_bad_layer=localize(model, source, art.path, xs[worst], tolerance))
    return report


def verify(model: Model, config: CodegenConfig, spec: CompilerSpec, n_inputs: int = 100,
           seed: int = 0, tolerance: float = 0.0, workdir=None) -> VerificationReport:
    model = normalize(model)
    config = replace(config, emit_test_harness=True)
    return verify_source(model, emit_model(model, config), spec, n_inputs, seed, tolerance,
                         workdir, str(config.unroll))


# --- timing ------------------------------------------------------------------

@dataclass(frozen=True)
class Timing:
    """Nanoseconds per inference over ``samples`` batches of ``repetitions`` calls."""

    samples_ns: tuple[float, ...]
    repetitions: int
    overhead_ns: float = 0.0

    @property
    def median(self) -> float:
        return statistics.median(self.samples_ns)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples_ns)

    @property
    def min(self) -> float:
        return min(self.samples_ns)


def bench_once(binary: str | Path, repetitions: int, warmup: int, timeout: float = 3600) -> float:
    r = subprocess.run([str(binary), "--bench", str(repetitions), str(warmup)],
                       capture_output=True, text=True, timeout=timeout)
    if r.returncode != 0:
        raise TransportError(f"bench run failed with status {r.returncode}: {r.stderr.strip()}")
    try:
        return float(r.stdout.split()[0])
    except (IndexError, ValueError):
        raise TransportError(f"unparseable bench output {r.stdout!r}")


_overhead_cache: dict[tuple, float] = {}


def call_overhead(spec: CompilerSpec, repetitions: int = 100000) -> float:
    """Per-call cost of the bench loop around an empty model function."""
    key = (spec, repetitions)
    if key not in _overhead_cache:
        text = "\n".join([
            *HARNESS_PRELUDE,
            "void cnn_infer(const float *input, float *output)",
            "{",
            "    output[0] = input[0];",
            "}",
            "",
            harness_main("cnn_infer", 1, 1),
        ]) + "\n"
        with tempfile.TemporaryDirectory(prefix="cnn2c-") as tmp:
            art = compile(text, spec, workdir=tmp)
            _overhead_cache[key] = min(bench_once(art.path, repetitions, repetitions // 10) for _ in range(5))
    return _overhead_cache[key]

def time_binary(binary: str | Path, input_shape: Shape3 | None = None, repetitions: int = 1000,
                warmup: int | None = None, samples: int = 5, overhead_ns: float = 0.0,
                min_batch_ns: float = 2e7) -> Timing:
    """Median/mean/min per-inference time; the harness loops internally.

    ``input_shape`` is accepted for symmetry with the verification transport;
    the bench mode fills its own deterministic input. When one batch of
    ``repetitions`` calls would take less than ``min_batch_ns`` the
    repetition count is scaled up so the clock resolution stays negligible.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    warmup = repetitions // 10 if warmup is None else warmup
    probe = bench_once(binary, repetitions, warmup)
    if probe * repetitions < min_batch_ns:
        repetitions = int(min(repetitions * 100, -(-min_batch_ns // max(probe, 1.0))))
    raw = [bench_once(binary, repetitions, warmup) for _ in range(samples)]
    return Timing(tuple(max(t - overhead_ns, 0.0) for t in raw), repetitions, overhead_ns)


def time_source(source: CSourceFile, spec: CompilerSpec, repetitions: int = 1000, samples: int = 5,
                subtract_overhead: bool = True, workdir=None) -> Timing:
    art = compile(source, spec, workdir=workdir)
    overhead = call_overhead(spec) if subtract_overhead else 0.0
    return time_binary(art.path, source.input_shape, repetitions, samples=samples, overhead_ns=overhead)


def default_repetitions(model: Model) -> int:
    """100000 for ball-scale nets down to 1000 for robot-scale nets."""
    macs = sum(
        s.height * s.width * layer.filters * layer.macs_per_output
        for layer, s in zip(model.layers, infer_shapes(model)) if isinstance(layer, Conv2D)
    )
    return int(min(100000, max(1000, 2e9 // max(macs, 1))))


# --- autotuning --------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    backend: Backend
    unroll: UnrollLevel
    variant: int = 0

    def __str__(self) -> str:
        return f"{Backend(self.backend).value}/{self.unroll}/v{self.variant}"

    @property
    def choice(self) -> LayerChoice:
        return LayerChoice(Backend(self.backend), self.unroll, self.variant)


@dataclass(frozen=True)
class Measurement:
    candidate_id: int
    candidate: Candidate
    verified: bool
    median_ns: float | None = None
    mean_ns: float | None = None
    min_ns: float | None = None
    error: str = ""


@dataclass(frozen=True)
class LayerTuning:
    index: int
    kind: str
    measurements: tuple[Measurement, ...]
    chosen: int

    @property
    def chosen_candidate(self) -> Candidate:
        return next(m.candidate for m in self.measurements if m.candidate_id == self.chosen)


@dataclass(frozen=True)
class TuneReport:
    layers: tuple[LayerTuning, ...]
    overrides: dict
    total_before_ns: float | None
    total_after_ns: float | None
    final: VerificationReport | None = None

    def config(self, base: CodegenConfig = CodegenConfig()) -> CodegenConfig:
        return replace(base, per_layer_overrides=dict(self.overrides))


def select(measurements: Sequence[Measurement], tie_tolerance: float = 0.0) -> int:
    """Candidate id with the smallest median among verified measurements.

    Medians within ``tie_tolerance`` (relative) of the best are treated as
    ties; ties go to the lowest candidate id.
    """
    timed = [m for m in measurements if m.verified and m.median_ns is not None]
    if not timed:
        raise HarnessError("no candidate passed verification")
    best = min(m.median_ns for m in timed)
    tied = [m.candidate_id for m in timed if m.median_ns <= best * (1 + tie_tolerance)]
    return min(tied)


DEFAULT_SPACE = (
    Candidate(Backend.GENERIC, UnrollLevel.none(), 0),
    Candidate(Backend.GENERIC, UnrollLevel.full(), 0),
    Candidate(Backend.SSSE3, UnrollLevel.full(), 0),
)


def variant_space(layer, backends=(Backend.GENERIC, Backend.SSSE3),
                  unrolls=(UnrollLevel.none(), UnrollLevel.keep(2), UnrollLevel.full())) -> list[Candidate]:
    variants = (0, 1, 2) if isinstance(layer, Conv2D) else (0,)
    return [Candidate(b, u, v) for b in backends for u in unrolls for v in variants]


Timer = Callable[[Model, CSourceFile], Timing]


def single_layer_model(model: Model, index: int) -> Model:
    shape = input_shapes(model)[index]
    return Model(f"{model.name}_l{index}", shape, (model.layers[index],))


def autotune(model: Model, spec_for: Callable[[Backend], CompilerSpec] | CompilerSpec,
             space: Sequence[Candidate] | Callable[[int, object], Sequence[Candidate]] = DEFAULT_SPACE,
             tolerance: float = 1e-5, n_verify: int = 10, seed: int = 0,
             repetitions: int | None = None, samples: int = 5, timer: Timer | None = None,
             tie_tolerance: float = 0.0, measure_totals: bool = True, workdir=None) -> TuneReport:
    """Greedy per-layer choice among candidates, each timed as a one-layer model.

    Every candidate is first verified against the interpreter on that layer;
    failing candidates are recorded and never timed. ``timer`` replaces the
    compile-and-bench step, which makes selection reproducible from recorded
    timings.
    """
    model = normalize(model)
    if isinstance(spec_for, CompilerSpec):
        base_spec = spec_for

        def spec_for(backend, _b=base_spec):
            if Backend(backend) is Backend.SSSE3 and _b.profile == "ansi-strict":
                return replace(_b, profile="native-simd")
            return _b

    reps = repetitions or default_repetitions(model)

    def default_timer(sub: Model, source: CSourceFile, backend: Backend) -> Timing:
        return time_source(source, spec_for(backend), max(1000, reps * 4), samples, workdir=workdir)

    layers, overrides = [], {}
    for i, layer in enumerate(model.layers):
        cands = list(space(i, layer) if callable(space) else space)
        sub = single_layer_model(model, i)
        results = []
        for cid, cand in enumerate(cands):
            cfg = CodegenConfig(backend=cand.backend, unroll=cand.unroll, conv_variant=cand.variant,
                                emit_test_harness=True)
            try:
                source = emit_model(sub, cfg)
                rep = verify_source(sub, source, spec_for(cand.backend), n_verify, seed, tolerance,
                                    workdir, str(cand.unroll))
            except HarnessError as exc:
                results.append(Measurement(cid, cand, False, error=str(exc).splitlines()[0]))
                continue
            if not rep.passed:
                results.append(Measurement(cid, cand, False, error=rep.summary()))
                continue
            t = timer(sub, source) if timer else default_timer(sub, source, cand.backend)
            results.append(Measurement(cid, cand, True, t.median, t.mean, t.min))
        chosen = select(results, tie_tolerance)
        layers.append(LayerTuning(i, layer.kind, tuple(results), chosen))
        overrides[i] = cands[chosen].choice

    before = after = None
    tuned = CodegenConfig(emit_test_harness=True, per_layer_overrides=overrides)
    simd = any(Backend(c.backend) is Backend.SSSE3 for c in overrides.values())
    final_spec = spec_for(Backend.SSSE3 if simd else Backend.GENERIC)
    final = verify_source(model, emit_model(model, tuned), final_spec, n_verify, seed, tolerance, workdir,
                          "per-layer")
    if not final.passed:
        raise HarnessError(f"tuned model failed verification: {final.summary()}")
    if measure_totals:
        baseline = {t.index: t.measurements[0].candidate.choice for t in layers}
        base_cfg = CodegenConfig(emit_test_harness=True, per_layer_overrides=baseline)
        base_simd = any(Backend(c.backend) is Backend.SSSE3 for c in baseline.values())
        runs = ((base_cfg, base_simd), (tuned, simd))
        if timer:
            before, after = (timer(model, emit_model(model, c)).median for c, _ in runs)
        else:
            before, after = (
                default_timer(model, emit_model(model, c), Backend.SSSE3 if v else Backend.GENERIC).median
                for c, v in runs
            )
    return TuneReport(tuple(layers), overrides, before, after, final)
