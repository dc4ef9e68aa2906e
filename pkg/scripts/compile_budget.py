"""Generated source size and C compile time for every (net, backend, unroll).

Fully unrolled code grows with the number of multiply-adds, so the larger
nets produce sources of tens of megabytes; this shows what each compiler
makes of them.

    python scripts/compile_budget.py --cc clang gcc --opt -O0
"""

import argparse
import resource
import tempfile
import time
from dataclasses import dataclass

from cnn2c import harness, zoo
from cnn2c.codegen import Backend, CodegenConfig, UnrollLevel, emit_model
from cnn2c.passes import normalize


@dataclass(frozen=True)
class BudgetConfig:
    compilers: tuple[str, ...] = ("cc",)
    opt: str = "-O0"
    backends: tuple[str, ...] = ("generic",)
    levels: tuple[str, ...] = ("none", "outer:2", "outer:1", "full")
    nets: tuple[str, ...] = tuple(zoo.ARCHITECTURES)
    timeout: float = 900.0
    memory_limit: int | None = None


def main(cfg: BudgetConfig) -> None:
    print(f"{'net':<11} {'backend':<8} {'unroll':<8} {'MB':>6} {'cc':<7} {'seconds':>8}  result")
    for net in cfg.nets:
        model = normalize(zoo.build(net))
        for backend in map(Backend, cfg.backends):
            for level in cfg.levels:
                src = emit_model(model, CodegenConfig(backend=backend, unroll=UnrollLevel.parse(level)))
                for cc in cfg.compilers:
                    spec = harness.CompilerSpec.for_backend(backend, cc, opt_level=cfg.opt,
                                                            memory_limit=cfg.memory_limit)
                    t0 = time.perf_counter()
                    try:
                        with tempfile.TemporaryDirectory() as tmp:
                            harness.compile(src, spec, workdir=tmp, timeout=cfg.timeout)
                        result = "ok"
                    except harness.HarnessError as exc:
                        result = str(exc).splitlines()[0]
                    dt = time.perf_counter() - t0
                    print(f"{net:<11} {backend.value:<8} {level:<8} {len(src.text) / 1e6:>6.1f} {cc:<7} "
                          f"{dt:>8.1f}  {result}", flush=True)
    peak = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1e6
    print(f"peak compiler resident set: {peak:.1f} GB")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cc", nargs="+", default=["cc"])
    p.add_argument("--opt", default="-O0")
    p.add_argument("--backends", nargs="+", choices=[b.value for b in Backend], default=["generic"])
    p.add_argument("--levels", nargs="+", default=list(BudgetConfig.levels))
    p.add_argument("--nets", nargs="+", choices=sorted(zoo.ARCHITECTURES), default=list(zoo.ARCHITECTURES))
    p.add_argument("--timeout", type=float, default=900.0)
    p.add_argument("--memory-limit-gb", type=float, default=None)
    a = p.parse_args()
    limit = int(a.memory_limit_gb * 1e9) if a.memory_limit_gb else None
    main(BudgetConfig(tuple(a.cc), a.opt, tuple(a.backends), tuple(a.levels), tuple(a.nets),
                      a.timeout, limit))
