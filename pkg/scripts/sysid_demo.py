"""Fit the neural ODE model on random-control car data and report prediction error."""
import argparse

from nlbac.car_env import EnvConfig
from nlbac.sysid import SysIdConfig, identify


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = identify(SysIdConfig(EnvConfig(), steps=args.steps, seed=args.seed),
                   log=print)
    print(f"final: 1-step L1 {res.one_step:.4f}, 2-step L1 {res.two_step:.4f}, {res.seconds:.1f} s")


if __name__ == "__main__":
    main()
