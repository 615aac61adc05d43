"""Build a synthetic seed corpus and object database."""

import argparse
from dataclasses import dataclass
from pathlib import Path

from fusionprobe.synthetic import build_dataset


@dataclass
class DatasetConfig:
    out: Path = Path("data")
    n_seeds: int = 50
    n_objects: int = 20
    seed: int = 0


def main(cfg: DatasetConfig) -> None:
    info = build_dataset(cfg.out, cfg.n_seeds, cfg.n_objects, cfg.seed)
    print(f"{len(info['seeds'])} seeds, {len(info['objects'])} objects under {cfg.out}")


if __name__ == "__main__":
    d = DatasetConfig()
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=d.out)
    p.add_argument("--n-seeds", type=int, default=d.n_seeds)
    p.add_argument("--n-objects", type=int, default=d.n_objects)
    p.add_argument("--seed", type=int, default=d.seed)
    a = p.parse_args()
    main(DatasetConfig(a.out, a.n_seeds, a.n_objects, a.seed))
