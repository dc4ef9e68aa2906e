"""Speed of the ball classifier as code-generation features are switched on.

The baseline is the generic backend with both outer loops rolled; SIMD is
then enabled, then full unrolling. Samples of every build are interleaved so
slow drift of the host affects all of them alike. Absolute numbers depend on
the machine; the ratios are what to look at.
"""

import argparse
import tempfile
from dataclasses import dataclass

import numpy as np

from cnn2c import harness, zoo
from cnn2c.codegen import Backend, CodegenConfig, UnrollLevel, emit_model
from cnn2c.passes import normalize


@dataclass(frozen=True)
class AblationConfig:
    cc: str = harness.default_compiler()
    repetitions: int = 100000
    samples: int = 9
    seed: int = 2019
    net: str = "ball"


BUILDS = (
    ("generic, outer:2", Backend.GENERIC, UnrollLevel.keep(2)),
    ("generic, none", Backend.GENERIC, UnrollLevel.none()),
    ("generic, full", Backend.GENERIC, UnrollLevel.full()),
    ("ssse3, outer:2", Backend.SSSE3, UnrollLevel.keep(2)),
    ("ssse3, outer:1", Backend.SSSE3, UnrollLevel.keep(1)),
    ("ssse3, full", Backend.SSSE3, UnrollLevel.full()),
)


def main(cfg: AblationConfig) -> None:
    model = normalize(zoo.build(cfg.net, cfg.seed))
    binaries, overhead = {}, {}
    with tempfile.TemporaryDirectory() as tmp:
        for label, backend, level in BUILDS:
            spec = harness.CompilerSpec.for_backend(backend, cfg.cc)
            src = emit_model(model, CodegenConfig(backend=backend, unroll=level, emit_test_harness=True))
            binaries[label] = harness.compile(src, spec, workdir=f"{tmp}/{len(binaries)}").path
            overhead[label] = harness.call_overhead(spec)
        times = {label: [] for label in binaries}
        for _ in range(cfg.samples):
            for label, binary in binaries.items():
                ns = harness.bench_once(binary, cfg.repetitions, cfg.repetitions // 10)
                times[label].append(max(ns - overhead[label], 0.0))
    base = float(np.median(times[BUILDS[0][0]]))
    print(f"{cfg.net}, {cfg.cc}, {cfg.repetitions} calls x {cfg.samples} samples")
    print(f"{'build':<18} {'median ns':>10} {'min ns':>10} {'speed-up':>9}")
    for label, ts in times.items():
        med = float(np.median(ts))
        print(f"{label:<18} {med:>10.0f} {min(ts):>10.0f} {base / med:>9.2f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cc", default=AblationConfig.cc)
    p.add_argument("--reps", type=int, default=AblationConfig.repetitions)
    p.add_argument("--samples", type=int, default=AblationConfig.samples)
    p.add_argument("--net", choices=sorted(zoo.ARCHITECTURES), default="ball")
    a = p.parse_args()
    main(AblationConfig(a.cc, a.reps, a.samples, net=a.net))
