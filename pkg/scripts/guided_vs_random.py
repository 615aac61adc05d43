"""Compare fitness-guided and random insertion against the builtin detector
with a range-limited fault injected. Prints one row per repeat and mode."""

import argparse
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fusionprobe.campaign import run_campaign
from fusionprobe.config import config_from_dict


@dataclass
class CompareConfig:
    data: Path = Path("data")
    repeats: int = 5
    max_range: float = 25.0
    n_insertions: int = 3
    try_num: int = 5
    out: Path | None = None
    modes: tuple = field(default=("guided", "random"))


def run(cfg: CompareConfig) -> list[dict]:
    rows = []
    for rep in range(cfg.repeats):
        for mode in cfg.modes:
            c = config_from_dict({"seeds_dir": str(cfg.data / "seeds"), "objects_dir": str(cfg.data / "objects"),
                                  "guidance": mode, "rng_seed": rep, "n_insertions": cfg.n_insertions,
                                  "try_num": cfg.try_num,
                                  "sut": {"params": {"faults": [{"max_range": cfg.max_range}]}}})
            t = run_campaign(c, persist=False).totals
            rows.append({"repeat": rep, "mode": mode, "mr_violations": t["mr_violations"],
                         **{f"new_{k}": v for k, v in t["new_faults"].items()}, "mc": t["mc"]})
            print(json.dumps(rows[-1]))
    for mode in cfg.modes:
        sel = [r["mr_violations"] for r in rows if r["mode"] == mode]
        print(f"{mode}: mean MR violations {np.mean(sel):.2f} (sd {np.std(sel):.2f})")
    if cfg.out:
        cfg.out.write_text(json.dumps({"config": {k: str(v) for k, v in asdict(cfg).items()}, "rows": rows},
                                      indent=2))
    return rows


if __name__ == "__main__":
    d = CompareConfig()
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", type=Path, default=d.data)
    p.add_argument("--repeats", type=int, default=d.repeats)
    p.add_argument("--max-range", type=float, default=d.max_range)
    p.add_argument("--out", type=Path)
    a = p.parse_args()
    run(CompareConfig(a.data, a.repeats, a.max_range, out=a.out))
