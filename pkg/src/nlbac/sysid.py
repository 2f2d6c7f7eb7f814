"""Standalone identification of the car chain with a neural ODE.

Random-control episodes from the simulator are split into training and
held-out sets; the model is fitted on short windows and scored by the mean
L1 error (summed over state dimensions) of one- and two-step predictions.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .car_env import CarFollowingEnv, EnvConfig
from .diff_core import IntegratorConfig, make_optimizer
from .node_model import NodeModel, TrajectoryStore, predict_next, train_step


@dataclass
class SysIdConfig:
    env: EnvConfig
    train_episodes: int = 10
    test_episodes: int = 3
    steps: int = 5000
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 128
    horizon: int = 2
    hidden: tuple[int, ...] = (64, 64)
    eval_samples: int = 1000
    eval_every: int = 500
    seed: int = 0


@dataclass
class SysIdResult:
    model: NodeModel
    one_step: float
    two_step: float
    steps: int
    seconds: float
    history: list[tuple[int, float, float]]


def collect_random(env_cfg: EnvConfig, episodes: int, rng: np.random.Generator) -> TrajectoryStore:
    """Episodes driven by controls drawn uniformly from the actuator range."""
    env = CarFollowingEnv(env_cfg, seed=int(rng.integers(2**31)))
    store = TrajectoryStore(max_episodes=max(episodes, 1))
    for _ in range(episodes):
        x = env.reset()
        ts, xs, us = [0.0], [x], []
        done = False
        while not done:
            u = float(rng.uniform(-env_cfg.u_max, env_cfg.u_max))
            out, done = env.step(u)
            ts.append(env.t)
            xs.append(out.next_state)
            us.append(u)
        store.add_episode(ts, xs, us)
    return store


def rollout_errors(model: NodeModel, store: TrajectoryStore, rng: np.random.Generator,
                   n: int) -> tuple[float, float]:
    """Mean L1 error of the first and of the second predicted state."""
    batch = store.sample(rng, n, 2)
    dt = model.integrator.interval_length
    x1 = predict_next(model, batch.t0, batch.states[0], batch.controls[0])
    x2 = predict_next(model, batch.t0 + dt, x1, batch.controls[1])
    e1 = np.abs(x1 - batch.states[1]).sum(axis=1).mean()
    e2 = np.abs(x2 - batch.states[2]).sum(axis=1).mean()
    return float(e1), float(e2)


def identify(cfg: SysIdConfig, log=None) -> SysIdResult:
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng, test_rng, init_rng, batch_rng = (np.random.default_rng(s) for s in seeds)
    train = collect_random(cfg.env, cfg.train_episodes, data_rng)
    test = collect_random(cfg.env, cfg.test_episodes, test_rng)
    ec = cfg.env
    integ = IntegratorConfig(ec.integrator_scheme, ec.integrator_substeps, ec.dt)
    model = NodeModel.create(init_rng, hidden=cfg.hidden, integrator=integ)
    model.fit_scaling(*train.transitions())
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    history = []
    t0 = time.perf_counter()
    for i in range(1, cfg.steps + 1):
        batch = train.sample(batch_rng, cfg.batch_size, cfg.horizon)
        train_step(model, batch, cfg.lr, opt)
        if cfg.eval_every and (i % cfg.eval_every == 0 or i == cfg.steps):
            e1, e2 = rollout_errors(model, test, np.random.default_rng(cfg.seed + 1), cfg.eval_samples)
            history.append((i, e1, e2))
            if log:
                log(f"step {i}: one-step {e1:.4f} two-step {e2:.4f}")
    if history and history[-1][0] == cfg.steps:
        _, e1, e2 = history[-1]
    else:
        e1, e2 = rollout_errors(model, test, np.random.default_rng(cfg.seed + 1), cfg.eval_samples)
    return SysIdResult(model, e1, e2, cfg.steps, time.perf_counter() - t0, history)
