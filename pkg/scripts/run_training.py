"""Train the safe controller pair and summarise the learning curve.

    python scripts/run_training.py --config configs/default.json --seed 0
"""
import argparse

import numpy as np

from nlbac.trainer import load_config, Trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    recs = Trainer(cfg).train()
    for r in recs:
        print(f"ep {r.episode:3d}  reward {r.cum_reward:9.1f}  violations {r.violations:4d}  "
              f"backup {r.backup_steps:4d}  lambda ({r.lambda1:.3f}, {r.lambda2:.3f})  zeta {r.zeta:.3f}")
    if len(recs) >= 20:
        rw = np.array([r.cum_reward for r in recs])
        vi = np.array([r.violations for r in recs])
        print(f"reward     first10 {rw[:10].mean():9.1f}  last10 {rw[-10:].mean():9.1f}")
        print(f"violations first10 {vi[:10].mean():9.1f}  last10 {vi[-10:].mean():9.1f}")
    print(f"log: {cfg.out_dir}/train_log.csv")


if __name__ == "__main__":
    main()
