"""Insertion success rate as the number of objects per seed grows, at a fixed
trial budget."""

import argparse
from dataclasses import dataclass
from pathlib import Path

from fusionprobe.campaign import run_campaign
from fusionprobe.config import config_from_dict


@dataclass
class AblationConfig:
    data: Path = Path("data")
    max_n: int = 6
    try_num: int = 10
    rng_seed: int = 0


def run(cfg: AblationConfig) -> list[float]:
    rates = []
    for n in range(1, cfg.max_n + 1):
        c = config_from_dict({"seeds_dir": str(cfg.data / "seeds"), "objects_dir": str(cfg.data / "objects"),
                              "n_insertions": n, "try_num": cfg.try_num, "rng_seed": cfg.rng_seed})
        seeds = run_campaign(c, persist=False).seeds
        rates.append(sum(len(r.inserted) == n for r in seeds) / max(len(seeds), 1))
        print(f"N={n}  success rate {rates[-1]:.2f}")
    return rates


if __name__ == "__main__":
    d = AblationConfig()
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", type=Path, default=d.data)
    p.add_argument("--max-n", type=int, default=d.max_n)
    p.add_argument("--try-num", type=int, default=d.try_num)
    p.add_argument("--seed", type=int, default=d.rng_seed)
    a = p.parse_args()
    run(AblationConfig(a.data, a.max_n, a.try_num, a.seed))
