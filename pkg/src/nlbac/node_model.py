"""Learned continuous-time dynamics and its supervised training loop.

The field is ``F(t, x, u) = out_scale * mlp(normalize([t, x, u]))``. The
fixed normalizer and output scale are fitted once from data; with a
zero-weight network the field vanishes and predictions equal the input
state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .diff_core import (GradientRecord, IntegratorConfig, InvalidInputError, MlpParams,
                        Normalizer, integrate, integrate_backward, integrate_with_tape,
                        mlp_forward, mlp_vjp)


@dataclass
class NodeModel:
    net: MlpParams
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    state_dim: int = 10
    control_dim: int = 1
    in_norm: Normalizer | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        n_in = self.state_dim + self.control_dim + 1
        if self.net.n_in != n_in or self.net.n_out != self.state_dim:
            raise InvalidInputError(
                f"net maps {self.net.n_in}->{self.net.n_out}, need {n_in}->{self.state_dim}")
        if self.in_norm is None:
            self.in_norm = Normalizer.identity(n_in)
        if self.out_scale is None:
            self.out_scale = np.ones(self.state_dim)

    @classmethod
    def create(cls, rng: np.random.Generator, state_dim: int = 10, control_dim: int = 1,
               hidden: tuple[int, ...] = (64, 64), integrator: IntegratorConfig | None = None):
        net = MlpParams.init([state_dim + control_dim + 1, *hidden, state_dim], rng)
        return cls(net, integrator or IntegratorConfig(), state_dim, control_dim)

    def field(self, param_grads: bool = True) -> "NodeField":
        return NodeField(self, param_grads)

    def fit_scaling(self, times: np.ndarray, states: np.ndarray, controls: np.ndarray,
                    next_states: np.ndarray) -> None:
        """Fit the input normalizer and output scale from one-step transitions."""
        z = np.column_stack([times, states, controls])
        self.in_norm = Normalizer.fit(z)
        rates = (next_states - states) / self.integrator.interval_length
        self.out_scale = np.maximum(rates.std(axis=0), 1e-3)

    def to_layers(self) -> dict[str, np.ndarray]:
        layers = checkpoint.mlp_to_layers("node", self.net)
        layers.update(checkpoint.normalizer_to_layers("node.in_norm", self.in_norm))
        layers["node.out_scale"] = self.out_scale
        return layers

    @classmethod
    def from_layers(cls, layers, integrator: IntegratorConfig | None = None, control_dim: int = 1):
        net = checkpoint.mlp_from_layers("node", layers, "tanh")
        return cls(net, integrator or IntegratorConfig(), net.n_out, control_dim,
                   checkpoint.normalizer_from_layers("node.in_norm", layers),
                   layers["node.out_scale"])


class NodeField:
    """Differentiable vector field view of a :class:`NodeModel`."""

    def __init__(self, model: NodeModel, param_grads: bool = True):
        self.model = model
        self.param_grads = param_grads

    def _inputs(self, t, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if x.ndim == 1:
            return np.concatenate([[float(t)], x, np.atleast_1d(u)])
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))[:, None]
        return np.concatenate([tcol, x, u.reshape(x.shape[0], -1)], axis=1)

    def __call__(self, t, x, u):
        return self.forward(t, x, u)[0]

    def forward(self, t, x, u):
        m = self.model
        out, acts = mlp_forward(m.net, m.in_norm(self._inputs(t, x, u)), return_cache=True)
        return m.out_scale * out, acts

    def backward(self, acts, upstream):
        m = self.model
        grad, gz = mlp_vjp(m.net, acts, upstream * m.out_scale, self.param_grads)
        gz = m.in_norm.backward(gz)
        n = m.state_dim
        return grad, gz[..., 1:1 + n], gz[..., 1 + n:]


def predict_next(model: NodeModel, t, x: np.ndarray, u) -> np.ndarray:
    """One-interval prediction with the control held constant."""
    u = np.asarray(u, dtype=np.float64)
    if np.ndim(x) == 1:
        u = np.atleast_1d(u)
    return integrate(model.field(), x, u, model.integrator, t0=t)


def rollout(model: NodeModel, t, x: np.ndarray, controls) -> list[np.ndarray]:
    """Chain :func:`predict_next`; returns one predicted state per control."""
    controls = list(controls)
    if not controls:
        raise InvalidInputError("rollout needs at least one control")
    dt = model.integrator.interval_length
    out = []
    cur = np.asarray(x, dtype=np.float64)
    for i, u in enumerate(controls):
        cur = predict_next(model, t + i * dt, cur, u)
        out.append(cur)
    return out


@dataclass
class TrajectoryBatch:
    """Windows of ``h + 1`` states and ``h`` controls.

    ``states`` has shape ``(h+1, B, n)``, ``controls`` ``(h, B, m)`` and ``t0``
    ``(B,)``; the unbatched form drops the ``B`` axis and uses a scalar ``t0``.
    """

    states: np.ndarray
    controls: np.ndarray
    t0: np.ndarray | float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.controls.ndim == self.states.ndim - 1:
            self.controls = self.controls[..., None]
        if len(self.states) != len(self.controls) + 1 or len(self.controls) < 1:
            raise InvalidInputError("need len(states) == len(controls) + 1 >= 2")

    @property
    def horizon(self) -> int:
        return len(self.controls)


def model_loss(model: NodeModel, batch: TrajectoryBatch, squared: bool = False) -> float:
    return loss_and_grad(model, batch, squared, need_grad=False)[0]


def loss_and_grad(model: NodeModel, batch: TrajectoryBatch, squared: bool = False,
                  need_grad: bool = True) -> tuple[float, GradientRecord | None]:
    """Horizon-averaged L1 (or squared) prediction error and its parameter gradient.

    Each step's error is summed over state dimensions and averaged over the batch.
    """
    h = batch.horizon
    dt = model.integrator.interval_length
    fld = model.field()
    n_batch = batch.states.shape[1] if batch.states.ndim == 3 else 1
    cur = batch.states[0]
    tapes, preds = [], []
    for i in range(h):
        t = batch.t0 + i * dt
        if need_grad:
            cur, tape = integrate_with_tape(fld, cur, batch.controls[i], model.integrator, t0=t)
            tapes.append(tape)
        else:
            cur = integrate(fld, cur, batch.controls[i], model.integrator, t0=t)
        preds.append(cur)
    errs = [p - s for p, s in zip(preds, batch.states[1:])]
    if squared:
        loss = sum(float(np.sum(e * e)) for e in errs) / (h * n_batch)
    else:
        loss = sum(float(np.sum(np.abs(e))) for e in errs) / (h * n_batch)
    if not need_grad:
        return loss, None
    grad = None
    carry = np.zeros_like(preds[-1])
    for i in range(h - 1, -1, -1):
        g_err = 2.0 * errs[i] if squared else np.sign(errs[i])
        carry = carry + g_err / (h * n_batch)
        dp, carry, _ = integrate_backward(fld, tapes[i], carry)
        grad = dp if grad is None else grad + dp
    grad.loss = loss
    return loss, grad


def train_step(model: NodeModel, batch: TrajectoryBatch, lr: float, optimizer=None,
               squared: bool = False) -> tuple[NodeModel, float]:
    """One descent step on the model loss; returns the pre-step loss.

    Without an ``optimizer`` this is ``psi <- psi - lr * grad``.
    """
    loss, grad = loss_and_grad(model, batch, squared)
    if optimizer is not None:
        optimizer.step(model.net, grad)
    elif lr != 0.0:
        for p, g in zip(model.net.arrays(), grad.arrays()):
            p -= lr * g
    return model, loss


class TrajectoryStore:
    """Whole recorded episodes, from which contiguous windows are drawn."""

    def __init__(self, max_episodes: int = 200):
        self.max_episodes = max_episodes
        self.episodes: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def add_episode(self, times, states, controls) -> None:
        times = np.asarray(times, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64)
        controls = np.asarray(controls, dtype=np.float64).reshape(len(states) - 1, -1)
        if len(times) != len(states):
            raise InvalidInputError("one time stamp per state required")
        if len(states) < 2:
            return
        self.episodes.append((times, states, controls))
        if len(self.episodes) > self.max_episodes:
            self.episodes.pop(0)

    def __len__(self) -> int:
        return len(self.episodes)

    def transitions(self):
        ts, xs, us, nx = [], [], [], []
        for times, states, controls in self.episodes:
            ts.append(times[:-1])
            xs.append(states[:-1])
            us.append(controls)
            nx.append(states[1:])
        return np.concatenate(ts), np.concatenate(xs), np.concatenate(us), np.concatenate(nx)

    def sample(self, rng: np.random.Generator, batch_size: int, horizon: int) -> TrajectoryBatch:
        usable = [e for e in self.episodes if len(e[1]) > horizon]
        if not usable:
            raise InvalidInputError(f"no episode longer than horizon {horizon}")
        lengths = np.array([len(e[1]) - horizon for e in usable])
        ep_idx = rng.choice(len(usable), size=batch_size, p=lengths / lengths.sum())
        starts = rng.integers(0, lengths[ep_idx])
        states = np.stack([usable[e][1][s:s + horizon + 1] for e, s in zip(ep_idx, starts)], axis=1)
        controls = np.stack([usable[e][2][s:s + horizon] for e, s in zip(ep_idx, starts)], axis=1)
        t0 = np.array([usable[e][0][s] for e, s in zip(ep_idx, starts)])
        return TrajectoryBatch(states, controls, t0)
