"""Training loop for the primary/backup controller pair.

Per environment step, in order: model update (every ``n_m``), critic and
Lyapunov updates, primary policy and entropy update, primary penalty growth,
primary multipliers (every ``n_L``), backup policy, entropy and penalty
(every ``n_b``), backup multipliers (every ``n_b * n_L``), then the action.
Transitions enter the replay buffer only when the primary controller acted.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint
from .actor_critic import (CriticSet, PolicyNet, ReplayBuffer, Transition, alpha_loss,
                           critics_from_layers, critics_to_layers, lyapunov_loss,
                           policy_from_layers, policy_to_layers, q_loss, sample_action,
                           target_update)
from .car_env import (CONTROL_DIM, STATE_DIM, CarFollowingEnv, EnvConfig, EnvFault,
                      backup_zone, trajectory_row, write_trajectory)
from .constrained_opt import (ConstraintValues, MultiplierState, controller_loss,
                              grow_penalty, update_multipliers)
from .diff_core import (IntegratorConfig, Normalizer, make_optimizer,
                        make_scalar_optimizer)
from .node_model import NodeModel, TrajectoryStore, train_step
from .safety import CbfSpec, car_barriers

log = logging.getLogger(__name__)

LOG_HEADER = ["episode", "cum_reward", "cum_cost", "violations", "backup_steps",
              "lambda1", "lambda2", "zeta", "c_p", "model_loss"]
PRIMARY, BACKUP = "primary", "backup"


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    episodes: int = 50
    seed: int = 0
    out_dir: str = "runs/default"
    algorithm: str = "nlbac"  # or "sac": no model, constraints or backup
    # learning rates: model, critics (Q and Lyapunov), controllers and entropy coefficients
    eta_1: float = 1e-3
    eta_2: float = 1e-3
    eta_3: float = 3e-4
    optimizer: str = "adam"
    # delays for model, multiplier and backup updates
    n_m: int = 4
    n_L: int = 5
    n_b: int = 2
    gamma: float = 0.99
    gamma_c: float = 0.995
    beta: float = 0.002
    cbf_gain: float = 0.2
    backup_dwell_steps: int = 20
    backup_enabled: bool = True
    zero_constraints: bool = False
    hidden: tuple[int, ...] = (64, 64)
    node_hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 128
    buffer_capacity: int = 100_000
    tau: float = 0.005
    target_entropy: float = -1.0
    init_log_alpha: float = 0.0
    reward_scale: float = 0.05
    cost_scale: float = 0.1
    c_p: float = 1.0
    c_b: float = 1.0
    rho_c: float = 1.0002
    c_max: float = 1e3
    warmup_episodes: int = 5
    model_pretrain_steps: int = 1500
    model_batch_size: int = 128
    model_horizon: int = 2
    model_loss: str = "l1"
    checkpoint: bool = True

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig(**self.env)
        self.hidden = tuple(self.hidden)
        self.node_hidden = tuple(self.node_hidden)
        for name in ("n_m", "n_L", "n_b"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("eta_1", "eta_2", "eta_3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if not self.rho_c > 1:
            raise ValueError("rho_c must be > 1")
        if self.algorithm not in ("nlbac", "sac"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.model_loss not in ("l1", "l2"):
            raise ValueError("model_loss must be 'l1' or 'l2'")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    """Read a JSON config whose keys are exactly :class:`TrainConfig` field names."""
    with open(path) as fh:
        raw = json.load(fh)
    return config_from_dict(raw, **overrides)


def config_from_dict(raw: dict[str, Any], **overrides) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    env_raw = raw.get("env", {})
    env_known = {f.name for f in dataclasses.fields(EnvConfig)}
    if set(env_raw) - env_known:
        raise ValueError(f"unknown env config keys: {sorted(set(env_raw) - env_known)}")
    kw = dict(raw)
    kw["env"] = EnvConfig(**env_raw)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kw)


@dataclass
class EpisodeRecord:
    episode: int
    cum_reward: float
    cum_cost: float
    violations: int
    backup_steps: int
    lambda1: float
    lambda2: float
    zeta: float
    c_p: float
    model_loss: float
    zone_steps: int = 0  # steps that started in the backup zone; not part of the CSV

    def row(self) -> list:
        return [getattr(self, k) for k in LOG_HEADER]


def due_updates(N: int, n_m: int, n_L: int, n_b: int) -> list[str]:
    """Updates that fire at global step ``N``, in execution order."""
    out = []
    if N % n_m == 0:
        out.append("model")
    out += ["critics", "primary"]
    if N % n_L == 0:
        out.append("multipliers")
    if N % n_b == 0:
        out.append("backup")
        if N % (n_b * n_L) == 0:
            out.append("backup_multipliers")
    return out


def select_controller(in_zone: bool, dwell: int | None, dwell_limit: int):
    """Pick the controller and the new dwell counter.

    ``dwell`` is ``None`` outside the backup zone, otherwise the number of
    backup steps still allowed during the current visit.
    """
    if not in_zone:
        return PRIMARY, None
    if dwell is None:
        dwell = dwell_limit
    if dwell > 0:
        return BACKUP, dwell - 1
    return PRIMARY, 0


class EpisodeLog:
    """Append-only training CSV; header written once."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            new = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = open(self.path, "a", newline="")
        except OSError as exc:
            raise OSError(f"cannot open training log {self.path}: {exc}") from exc
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(LOG_HEADER)
            self._fh.flush()

    def append(self, rec: EpisodeRecord) -> None:
        try:
            self._w.writerow([repr(v) if isinstance(v, float) else v for v in rec.row()])
            self._fh.flush()
        except OSError as exc:
            raise OSError(f"writing {self.path}: {exc}") from exc

    def close(self) -> None:
        self._fh.close()


def read_log(path: str | Path) -> list[EpisodeRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(EpisodeRecord(int(r["episode"]), float(r["cum_reward"]), float(r["cum_cost"]),
                                 int(r["violations"]), int(r["backup_steps"]), float(r["lambda1"]),
                                 float(r["lambda2"]), float(r["zeta"]), float(r["c_p"]),
                                 float(r["model_loss"])))
    return out


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.out_dir)
        names = ["init", "env", "warmup", "act", "replay", "sac", "constraint", "backup", "model"]
        seqs = np.random.SeedSequence(cfg.seed).spawn(len(names))
        self.rngs = {n: np.random.default_rng(s) for n, s in zip(names, seqs)}
        ec = cfg.env
        self.env = CarFollowingEnv(ec, seed=int(self.rngs["env"].integers(2**31)))
        self.integrator = IntegratorConfig(ec.integrator_scheme, ec.integrator_substeps, ec.dt)
        self.spec = CbfSpec.uniform(car_barriers(ec.delta), 2, cfg.cbf_gain)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, STATE_DIM, CONTROL_DIM, self.rngs["replay"])
        self.model_data = TrajectoryStore()
        self.ms = MultiplierState.initial(self.spec.m, c_p=cfg.c_p, c_b=cfg.c_b,
                                          rho_c=cfg.rho_c, c_max=cfg.c_max)
        self.values = ConstraintValues(np.zeros(self.spec.m), 0.0, np.zeros(self.spec.m))
        self.N = 0
        self.counts = {k: 0 for k in ("model", "critics", "primary", "multipliers", "backup",
                                      "backup_multipliers")}
        self.model_losses: list[float] = []
        self.dwell: int | None = None
        self._built = False

    # ------------------------------------------------------------ setup

    def _build(self) -> None:
        """Create networks after warm-up data has fixed the input normalizers."""
        cfg, rng = self.cfg, self.rngs["init"]
        t, x, u, xn = self.model_data.transitions()
        snorm = Normalizer.fit(x)
        self.policy = PolicyNet.create(rng, STATE_DIM, CONTROL_DIM, cfg.env.u_max, cfg.hidden, snorm)
        self.backup = PolicyNet.create(rng, STATE_DIM, CONTROL_DIM, cfg.env.u_max, cfg.hidden, snorm)
        self.critics = CriticSet.create(rng, STATE_DIM, CONTROL_DIM, cfg.hidden, snorm, cfg.env.u_max)
        self.node = NodeModel.create(rng, STATE_DIM, CONTROL_DIM, cfg.node_hidden, self.integrator)
        self.node.fit_scaling(t, x, u, xn)
        self.log_alpha_p = cfg.init_log_alpha
        self.log_alpha_b = cfg.init_log_alpha
        opt = lambda lr: make_optimizer(cfg.optimizer, lr)
        sopt = lambda lr: make_scalar_optimizer(cfg.optimizer, lr)
        self.opt = {
            "node": opt(cfg.eta_1), "q1": opt(cfg.eta_2), "q2": opt(cfg.eta_2),
            "lyapunov": opt(cfg.eta_2), "policy": opt(cfg.eta_3), "backup": opt(cfg.eta_3),
            "alpha_p": sopt(cfg.eta_3), "alpha_b": sopt(cfg.eta_3),
        }
        self._built = True

    def warmup(self) -> None:
        rng = self.rngs["warmup"]
        u_max = self.cfg.env.u_max
        for _ in range(self.cfg.warmup_episodes):
            x = self.env.reset()
            ts, xs, us = [0.0], [x], []
            done = False
            while not done:
                t = self.env.t
                u = float(rng.uniform(-u_max, u_max))
                out, done = self.env.step(u)
                self.buffer.add(Transition(t, x, np.array([u]), out.reward, out.cost, out.next_state))
                x = out.next_state
                ts.append(self.env.t)
                xs.append(x)
                us.append(u)
            self.model_data.add_episode(ts, xs, us)
        if not len(self.model_data):
            # no data: identity normalizers from the reset distribution
            x = self.env.reset()
            self.model_data.add_episode([0.0, self.cfg.env.dt], [x, x], [0.0])
        self._build()
        if self.cfg.algorithm == "nlbac":
            for _ in range(self.cfg.model_pretrain_steps):
                self._model_step()

    # ------------------------------------------------------------ updates

    def _model_step(self) -> float:
        batch = self.model_data.sample(self.rngs["model"], self.cfg.model_batch_size,
                                       self.cfg.model_horizon)
        _, loss = train_step(self.node, batch, self.cfg.eta_1, self.opt["node"],
                             squared=self.cfg.model_loss == "l2")
        return loss

    @property
    def alpha_p(self) -> float:
        return float(np.exp(self.log_alpha_p))

    @property
    def alpha_b(self) -> float:
        return float(np.exp(self.log_alpha_b))

    def update_model(self) -> None:
        self.model_losses.append(self._model_step())

    def update_critics(self, batch) -> None:
        cfg = self.cfg
        xi = self.rngs["sac"].standard_normal((len(batch), CONTROL_DIM))
        _, (g1, g2), _ = q_loss(self.critics, self.policy, self.alpha_p, batch, cfg.gamma, xi,
                                cfg.reward_scale)
        self.opt["q1"].step(self.critics.q1.net, g1)
        self.opt["q2"].step(self.critics.q2.net, g2)
        if cfg.algorithm == "nlbac":
            _, gl = lyapunov_loss(self.critics, batch, cfg.gamma_c, cfg.cost_scale)
            self.opt["lyapunov"].step(self.critics.lyapunov.net, gl)
            target_update(self.critics.lyapunov, self.critics.lyapunov_targ, cfg.tau)
        target_update(self.critics.q1, self.critics.q1_targ, cfg.tau)
        target_update(self.critics.q2, self.critics.q2_targ, cfg.tau)

    def _controller_step(self, kind: str, batch):
        cfg = self.cfg
        policy = self.policy if kind == PRIMARY else self.backup
        noise = self.rngs["sac"] if kind == PRIMARY else self.rngs["backup"]
        xi0 = noise.standard_normal((len(batch), CONTROL_DIM))
        if cfg.algorithm == "sac":
            xi1 = None
            zero = True
        else:
            crng = self.rngs["constraint"] if kind == PRIMARY else self.rngs["backup"]
            xi1 = crng.standard_normal((len(batch), CONTROL_DIM))
            zero = cfg.zero_constraints
        alpha = self.alpha_p if kind == PRIMARY else self.alpha_b
        res = controller_loss(policy, self.critics, alpha, batch.x, batch.t, xi0, xi1, self.node,
                              self.spec, self.ms, cfg.beta, kind, zero_constraints=zero)
        self.opt["policy" if kind == PRIMARY else "backup"].step(policy.net, res.grad)
        _, dlog = alpha_loss(self.log_alpha_p if kind == PRIMARY else self.log_alpha_b,
                             res.log_prob, cfg.target_entropy)
        if kind == PRIMARY:
            self.log_alpha_p = float(self.opt["alpha_p"].step(self.log_alpha_p, dlog))
        else:
            self.log_alpha_b = float(self.opt["alpha_b"].step(self.log_alpha_b, dlog))
        return res

    def update_primary(self, batch) -> None:
        res = self._controller_step(PRIMARY, batch)
        self.values = ConstraintValues(res.f, res.g, self.values.f_b)
        self.ms = grow_penalty(self.ms, "primary")

    def update_multipliers(self) -> None:
        self.ms = update_multipliers(self.ms, self.values, "primary")

    def update_backup(self, batch) -> None:
        res = self._controller_step(BACKUP, batch)
        self.values = ConstraintValues(self.values.f_p, self.values.g, res.f)
        self.ms = grow_penalty(self.ms, "backup")

    def update_backup_multipliers(self) -> None:
        self.ms = update_multipliers(self.ms, self.values, "backup")

    def step_updates(self, N: int) -> None:
        cfg = self.cfg
        batch = None
        for name in due_updates(N, cfg.n_m, cfg.n_L, cfg.n_b):
            if cfg.algorithm == "sac" and name not in ("critics", "primary"):
                continue
            if name == "model":
                self.update_model()
            elif name in ("critics", "primary", "backup"):
                if len(self.buffer) < cfg.batch_size:
                    continue
                if batch is None:
                    batch = self.buffer.sample(cfg.batch_size)
                getattr(self, f"update_{name}")(batch)
            elif name == "multipliers":
                self.update_multipliers()
            else:
                self.update_backup_multipliers()
            self.counts[name] += 1

    # ------------------------------------------------------------ acting

    def act(self, x: np.ndarray, deterministic: bool = False):
        use_backup = False
        if self.cfg.algorithm == "nlbac" and self.cfg.backup_enabled:
            which, self.dwell = select_controller(backup_zone(x, self.cfg.env), self.dwell,
                                                  self.cfg.backup_dwell_steps)
            use_backup = which == BACKUP
        policy = self.backup if use_backup else self.policy
        u, _ = sample_action(policy, x[None, :], self.rngs["act"], deterministic=deterministic)
        return float(u[0, 0]), use_backup

    def run_episode(self, index: int, train: bool = True, trajectory: list | None = None
                    ) -> EpisodeRecord:
        x = self.env.reset()
        self.dwell = None
        ts, xs, us = [0.0], [x], []
        cum_r = cum_c = 0.0
        violations = backup_steps = zone_steps = 0
        n_losses = len(self.model_losses)
        done = False
        while not done:
            if train:
                self.N += 1
                self.step_updates(self.N)
            t = self.env.t
            zone_steps += int(backup_zone(x, self.cfg.env))
            u, used_backup = self.act(x, deterministic=not train)
            try:
                out, done = self.env.step(u)
            except EnvFault:
                log.warning("episode %d aborted at t=%.2f: simulator fault", index, t)
                break
            if train and not used_backup:
                self.buffer.add(Transition(t, x, np.array([u]), out.reward, out.cost,
                                           out.next_state))
            if trajectory is not None:
                trajectory.append(trajectory_row(self.env.t, out, u, used_backup))
            x = out.next_state
            ts.append(self.env.t)
            xs.append(x)
            us.append(u)
            cum_r += out.reward
            cum_c += out.cost
            violations += int(out.violation)
            backup_steps += int(used_backup)
        if train:
            self.model_data.add_episode(ts, xs, us)
        new_losses = self.model_losses[n_losses:]
        return EpisodeRecord(index, cum_r, cum_c, violations, backup_steps,
                             float(self.ms.lambda_p[0]), float(self.ms.lambda_p[1]),
                             float(self.ms.zeta), float(self.ms.c_p),
                             float(np.mean(new_losses)) if new_losses else float("nan"), zone_steps)

    # ------------------------------------------------------------ persistence

    def checkpoint_layers(self) -> dict[str, np.ndarray]:
        layers = {}
        layers.update(policy_to_layers("policy_p", self.policy))
        layers.update(policy_to_layers("policy_b", self.backup))
        layers.update(critics_to_layers(self.critics))
        layers.update(self.node.to_layers())
        layers["lambda_p"] = self.ms.lambda_p
        layers["lambda_b"] = self.ms.lambda_b
        layers["zeta"] = np.array(self.ms.zeta)
        layers["c_p"] = np.array(self.ms.c_p)
        layers["c_b"] = np.array(self.ms.c_b)
        layers["log_alpha_p"] = np.array(self.log_alpha_p)
        layers["log_alpha_b"] = np.array(self.log_alpha_b)
        return layers

    def save_checkpoint(self, path: str | Path) -> None:
        checkpoint.save(path, self.checkpoint_layers(), {"config": self.cfg.to_dict(), "step": self.N})

    def load_layers(self, layers: dict[str, np.ndarray]) -> None:
        self.policy = policy_from_layers("policy_p", layers)
        self.backup = policy_from_layers("policy_b", layers)
        self.critics = critics_from_layers(layers)
        self.node = NodeModel.from_layers(layers, self.integrator, CONTROL_DIM)
        self.ms = dataclasses.replace(self.ms, lambda_p=layers["lambda_p"], lambda_b=layers["lambda_b"],
                                      zeta=float(layers["zeta"]), c_p=float(layers["c_p"]),
                                      c_b=float(layers["c_b"]))
        self.log_alpha_p = float(layers["log_alpha_p"])
        self.log_alpha_b = float(layers["log_alpha_b"])
        self._built = True

    @classmethod
    def from_checkpoint(cls, path: str | Path, out_dir: str | Path | None = None) -> "Trainer":
        layers, meta = checkpoint.load(path)
        cfg = config_from_dict(meta["config"])
        tr = cls(cfg, out_dir)
        tr.load_layers(layers)
        return tr

    # ------------------------------------------------------------ driver

    def train(self, episodes: int | None = None) -> list[EpisodeRecord]:
        cfg = self.cfg
        episodes = cfg.episodes if episodes is None else episodes
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
        records: list[EpisodeRecord] = []
        if episodes == 0:
            return records
        elog = EpisodeLog(self.out_dir / "train_log.csv")
        try:
            if not self._built:
                self.warmup()
            for ep in range(episodes):
                t0 = time.perf_counter()
                rec = self.run_episode(ep)
                records.append(rec)
                elog.append(rec)
                log.info("episode %d reward %.1f violations %d backup %d (%.1fs)", ep,
                         rec.cum_reward, rec.violations, rec.backup_steps,
                         time.perf_counter() - t0)
        except Exception:
            elog.close()
            if self._built and cfg.checkpoint:
                self.save_checkpoint(self.out_dir / "crash_checkpoint.json")
            raise
        elog.close()
        if cfg.checkpoint:
            self.save_checkpoint(self.out_dir / "checkpoint.json")
        return records

    def evaluate(self, episodes: int, trajectory_path: str | Path | None = None
                 ) -> list[EpisodeRecord]:
        rows: list | None = [] if trajectory_path else None
        recs = [self.run_episode(i, train=False, trajectory=rows) for i in range(episodes)]
        if trajectory_path:
            write_trajectory(trajectory_path, rows)
        return recs


def train(cfg: TrainConfig, out_dir: str | Path | None = None) -> list[EpisodeRecord]:
    return Trainer(cfg, out_dir).train()
