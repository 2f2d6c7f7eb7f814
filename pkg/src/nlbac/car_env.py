"""Five-car following simulator.

Cars 1, 2, 3 and 5 are human drivers, car 4 is the controlled robot. The
joint state is flattened as ``(p1, v1, p2, v2, ..., p5, v5)``; that order is
also the NODE input layout. Human accelerations and the robot control are
held constant over each interval and the joint state is advanced with the
same integrator used for the learned model.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .diff_core import IntegratorConfig, integrate

STATE_DIM = 10
CONTROL_DIM = 1
N_CARS = 5

TRAJECTORY_HEADER = ["t"] + [f"{k}{i}" for i in range(1, 6) for k in ("p", "v")] + [
    "u", "reward", "cost", "h1", "h2", "violation", "backup"]


class EnvFault(RuntimeError):
    """Non-finite simulator state; ends the episode."""


def pos(x: np.ndarray, car: int):
    """Position of car ``car`` (1-based); works on single states and batches."""
    return x[..., 2 * (car - 1)]


def vel(x: np.ndarray, car: int):
    return x[..., 2 * (car - 1) + 1]


@dataclass
class EnvConfig:
    dt: float = 0.02
    v_s: float = 3.0
    k_v: float = 4.0
    k_b: float = 20.0
    d_i: float = 0.1
    brake_gap_23: float = 6.5
    brake_gap_5: float = 13.0
    desired_band: tuple[float, float] = (9.0, 10.0)
    d_desired: float = 9.5
    bonus: float = 2.0
    effort_weight: float = 1.0
    delta: float = 3.5
    backup_margin: float = 1.0
    u_max: float = 20.0
    episode_length: int = 300
    integrator_scheme: str = "rk4"
    integrator_substeps: int = 1
    # initial-state sampler: uniform gap ranges (front car minus rear car) and velocity jitter
    gap_12: tuple[float, float] = (15.0, 20.0)
    gap_23: tuple[float, float] = (8.0, 12.0)
    gap_34: tuple[float, float] = (8.5, 11.0)
    gap_45: tuple[float, float] = (4.8, 6.5)
    v_jitter: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.desired_band = tuple(self.desired_band)
        for name in ("gap_12", "gap_23", "gap_34", "gap_45"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise ValueError(f"{name}: lower bound above upper bound")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.desired_band[0] < self.desired_band[1]:
            raise ValueError("desired_band lower must be < upper")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.gap_34[0] <= self.delta or self.gap_45[0] <= self.delta:
            raise ValueError("initial gaps must start strictly inside the safe set")

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.integrator_scheme, self.integrator_substeps, self.dt)


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    cost: float
    h_values: tuple[float, float]
    violation: bool
    in_backup_zone: bool


def human_accels(t: float, x: np.ndarray, cfg: EnvConfig) -> tuple[float, float, float, float]:
    """Accelerations (a1, a2, a3, a5) chosen by the human drivers."""
    kv, kb, vs = cfg.k_v, cfg.k_b, cfg.v_s
    a1 = kv * (vs - 4.0 * np.sin(t) - vel(x, 1))
    out = [a1]
    for i in (2, 3):
        gap = pos(x, i - 1) - pos(x, i)
        a = kv * (vs - vel(x, i))
        if abs(gap) < cfg.brake_gap_23:
            a -= kb * gap
        out.append(a)
    gap = pos(x, 3) - pos(x, 5)
    a5 = kv * (vs - vel(x, 5))
    if abs(gap) < cfg.brake_gap_5:
        a5 -= kb * gap
    out.append(a5)
    return tuple(float(a) for a in out)


def barrier_values(x: np.ndarray, delta: float):
    """``h1 = p3 - p4 - delta`` and ``h2 = p4 - p5 - delta`` (batch friendly)."""
    return pos(x, 3) - pos(x, 4) - delta, pos(x, 4) - pos(x, 5) - delta


def backup_zone(x: np.ndarray, cfg: EnvConfig) -> bool:
    """Robot car is within ``delta + backup_margin`` of car 5."""
    return bool(pos(x, 4) - pos(x, 5) < cfg.delta + cfg.backup_margin)


def clamp_control(u: float, cfg: EnvConfig) -> float:
    return float(np.clip(u, -cfg.u_max, cfg.u_max))


def step(t: float, x: np.ndarray, u: float, cfg: EnvConfig) -> StepOutcome:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or not np.isfinite(u):
        raise EnvFault(f"non-finite state or control at t={t}")
    u = clamp_control(u, cfg)
    a1, a2, a3, a5 = human_accels(t, x, cfg)
    gain = 1.0 + cfg.d_i
    accel = np.array([gain * a1, gain * a2, gain * a3, u, gain * a5])

    def field(_t, z, _u):
        dz = np.empty_like(z)
        dz[0::2] = z[1::2]
        dz[1::2] = accel
        return dz

    nxt = integrate(field, x, np.array([u]), cfg.integrator, t0=t)
    if not np.all(np.isfinite(nxt)):
        raise EnvFault(f"non-finite next state at t={t}")
    d = pos(nxt, 3) - pos(nxt, 4)
    lo, hi = cfg.desired_band
    reward = -cfg.effort_weight * u * u + (cfg.bonus if lo <= d <= hi else 0.0)
    cost = abs(d - cfg.d_desired)
    h1, h2 = barrier_values(nxt, cfg.delta)
    return StepOutcome(nxt, float(reward), float(cost), (float(h1), float(h2)),
                       bool(min(h1, h2) < 0.0), backup_zone(nxt, cfg))


def reset(cfg: EnvConfig, seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Sample an initial state with every barrier strictly positive."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        cfg.seed if seed is None else seed)
    gaps = [rng.uniform(*g) for g in (cfg.gap_12, cfg.gap_23, cfg.gap_34, cfg.gap_45)]
    p5 = 0.0
    p4 = p5 + gaps[3]
    p3 = p4 + gaps[2]
    p2 = p3 + gaps[1]
    p1 = p2 + gaps[0]
    v = cfg.v_s + rng.uniform(-cfg.v_jitter, cfg.v_jitter, size=N_CARS)
    x = np.empty(STATE_DIM)
    x[0::2] = [p1, p2, p3, p4, p5]
    x[1::2] = v
    return x


class CarFollowingEnv:
    """Stateful episode wrapper around :func:`step`."""

    def __init__(self, cfg: EnvConfig, seed: int | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.t = 0.0
        self.k = 0
        self.x = reset(cfg, self.rng)

    def reset(self) -> np.ndarray:
        self.t, self.k = 0.0, 0
        self.x = reset(self.cfg, self.rng)
        return self.x.copy()

    def step(self, u: float) -> tuple[StepOutcome, bool]:
        out = step(self.t, self.x, u, self.cfg)
        self.x = out.next_state
        self.k += 1
        self.t = self.k * self.cfg.dt
        return out, self.k >= self.cfg.episode_length


def trajectory_row(t: float, outcome: StepOutcome, u: float, backup: bool) -> list:
    return [t, *outcome.next_state.tolist(), u, outcome.reward, outcome.cost,
            *outcome.h_values, int(outcome.violation), int(backup)]


def write_trajectory(path: str | Path, rows: Iterable[list]) -> None:
    """Dump one row per step; ``t`` and the state refer to the post-step time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
