"""Write manifest + weight blobs for the bundled architectures.

    python scripts/make_fixtures.py out/ --seed 2019
"""

import argparse
from dataclasses import dataclass
from pathlib import Path

from cnn2c import zoo
from cnn2c.model import parameter_count
from cnn2c.modelio import save_model


@dataclass(frozen=True)
class FixtureConfig:
    out_dir: Path
    seed: int = 0
    names: tuple[str, ...] = tuple(zoo.ARCHITECTURES)


def main(cfg: FixtureConfig) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for name in cfg.names:
        model = zoo.build(name, cfg.seed)
        manifest, weights = cfg.out_dir / f"{name}.json", cfg.out_dir / f"{name}.bin"
        save_model(model, manifest, weights)
        n = sum(parameter_count(l) for l in model.layers)
        print(f"{manifest}  {weights}  ({n} weights, input {model.input_shape}, output {model.output_shape})")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--names", nargs="+", choices=sorted(zoo.ARCHITECTURES), default=list(zoo.ARCHITECTURES))
    a = p.parse_args()
    main(FixtureConfig(a.out_dir, a.seed, tuple(a.names)))
