"""Train with and without the safety machinery on the same seed and compare violations."""
import argparse
from dataclasses import replace

import numpy as np

from nlbac.trainer import load_config, Trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()
    base = load_config(args.config, seed=None, out_dir=None)
    for name, cfg in [("safe", base), ("sac", replace(base, algorithm="sac", backup_enabled=False))]:
        recs = Trainer(replace(cfg, out_dir=f"{args.out}/{name}")).train()
        vi = np.array([r.violations for r in recs])
        rw = np.array([r.cum_reward for r in recs])
        print(f"{name:5s} total violations {vi.sum():6d}  mean reward {rw.mean():9.1f}")


if __name__ == "__main__":
    main()
