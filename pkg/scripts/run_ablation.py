"""Run ablation arms over several seeds on the synthetic benchmark and print a summary table.

Example:
    python3 scripts/run_ablation.py --seeds 0 1 2 --arms full no_rc baseline --out runs/ablation \
        --config scripts/configs/desk.cfg
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from sda.config import RunConfig, parse_config
from sda.experiments import ARMS, run_seed


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", default=["full", "no_rc", "baseline", "no_pseudo", "frozen"],
                    choices=sorted(ARMS))
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("sda.trainer").setLevel(logging.WARNING)

    run = parse_config(args.config) if args.config else RunConfig()
    t0 = time.perf_counter()
    results = [run_seed(run, s, args.arms, args.out) for s in args.seeds]
    elapsed = time.perf_counter() - t0

    print(f"{'arm':<16}" + "".join(f"seed{r.seed:<6}" for r in results) + "mean    gap")
    for name, key in (("untrained", "untrained_mAP"), ("source-only", "pretrained_mAP")):
        vals = [getattr(r, key) for r in results]
        print(f"{name:<16}" + "".join(f"{v:<10.4f}" for v in vals) + f"{np.mean(vals):.4f}")
    for arm in args.arms:
        maps = [r.arms[arm].mAP for r in results]
        gap = np.mean([r.arms[arm].relation_gap for r in results])
        print(f"{arm:<16}" + "".join(f"{v:<10.4f}" for v in maps) + f"{np.mean(maps):<8.4f}{gap:.4f}")
    print(f"total {elapsed:.0f}s")
    if args.out:
        summary = {"seconds": elapsed, "seeds": [
            {"seed": r.seed, "untrained_mAP": r.untrained_mAP, "pretrained_mAP": r.pretrained_mAP,
             "arms": {a: {"mAP": v.mAP, "relation_gap": v.relation_gap} for a, v in r.arms.items()}}
            for r in results]}
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
