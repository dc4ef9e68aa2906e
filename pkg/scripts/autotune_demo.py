"""Per-layer autotuning of a bundled net, printing every measurement."""

import argparse
from dataclasses import dataclass

from cnn2c import harness, zoo
from cnn2c.passes import normalize


@dataclass(frozen=True)
class DemoConfig:
    net: str = "ball"
    cc: str = harness.default_compiler()
    full_space: bool = False
    samples: int = 5
    seed: int = 0


def main(cfg: DemoConfig) -> None:
    model = normalize(zoo.build(cfg.net, cfg.seed))
    space = (lambda i, layer: harness.variant_space(layer)) if cfg.full_space else harness.DEFAULT_SPACE
    report = harness.autotune(model, harness.CompilerSpec(cfg.cc), space, samples=cfg.samples)
    for lt in report.layers:
        print(f"layer {lt.index} ({lt.kind})")
        for m in lt.measurements:
            mark = "*" if m.candidate_id == lt.chosen else " "
            t = f"{m.median_ns:10.1f} ns" if m.verified else f"rejected: {m.error}"
            print(f"  {mark} {m.candidate_id:2d} {m.candidate!s:<22} {t}")
    print(f"whole model: {report.total_before_ns:.0f} ns with each layer's first candidate, "
          f"{report.total_after_ns:.0f} ns tuned")
    print(report.final.summary())


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--net", choices=sorted(zoo.ARCHITECTURES), default="ball")
    p.add_argument("--cc", default=DemoConfig.cc)
    p.add_argument("--full-space", action="store_true", help="every backend, unroll level and variant")
    p.add_argument("--samples", type=int, default=5)
    a = p.parse_args()
    main(DemoConfig(a.net, a.cc, a.full_space, a.samples))
