"""Command line entry point: ``nlbac {train,eval,sysid,plotdata}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .sysid import SysIdConfig, identify
from .trainer import LOG_HEADER, Trainer, load_config


def _train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out, episodes=args.episodes)
    records = Trainer(cfg).train()
    for rec in records:
        print(f"episode {rec.episode}: reward {rec.cum_reward:.1f} violations {rec.violations} "
              f"backup {rec.backup_steps}")
    print(f"wrote {Path(cfg.out_dir) / 'train_log.csv'}")
    return 0


def _eval(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    records = trainer.evaluate(args.episodes, args.trajectory)
    for rec in records:
        print(f"episode {rec.episode}: reward {rec.cum_reward:.1f} cost {rec.cum_cost:.1f} "
              f"violations {rec.violations} backup {rec.backup_steps}")
    return 0


def _sysid(args) -> int:
    cfg = load_config(args.config)
    sc = SysIdConfig(cfg.env, steps=args.steps, lr=cfg.eta_1, optimizer=cfg.optimizer,
                     batch_size=cfg.model_batch_size, horizon=cfg.model_horizon,
                     hidden=cfg.node_hidden, seed=cfg.seed)
    res = identify(sc, log=print)
    print(json.dumps({"one_step_l1": res.one_step, "two_step_l1": res.two_step,
                      "steps": res.steps, "seconds": round(res.seconds, 2)}))
    return 0


def _plotdata(args) -> int:
    with open(args.log, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{args.log} is not a training log")
        out = csv.writer(sys.stdout)
        out.writerow(["episode", "cum_reward", "violations"])
        for row in reader:
            out.writerow([row["episode"], row["cum_reward"], row["violations"]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlbac")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the primary and backup controllers")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--episodes", type=int)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="run deterministic episodes from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--trajectory", help="write a per-step CSV here")
    e.set_defaults(func=_eval)

    s = sub.add_parser("sysid", help="fit the dynamics model on random-control data")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, default=5000)
    s.set_defaults(func=_sysid)

    d = sub.add_parser("plotdata", help="print episode, reward and violation columns")
    d.add_argument("--log", required=True)
    d.set_defaults(func=_plotdata)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
