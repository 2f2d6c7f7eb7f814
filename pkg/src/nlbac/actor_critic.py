"""Soft actor-critic pieces: squashed-Gaussian policies, twin Q critics,
the Lyapunov (cost value) network, replay buffer, and their losses.

Every loss returns its value together with hand-derived gradients so the
training loop never needs a generic autodiff engine.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .diff_core import GradientRecord, MlpParams, Normalizer, mlp_forward, mlp_vjp

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
LOG2 = np.log(2.0)


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------- networks

@dataclass
class PolicyNet:
    """state -> (mean, log_std) per control dimension, squashed by tanh to +-bound."""

    net: MlpParams
    bound: float
    norm: Normalizer

    @classmethod
    def create(cls, rng, state_dim, control_dim, bound, hidden=(64, 64), norm=None):
        net = MlpParams.init([state_dim, *hidden, 2 * control_dim], rng)
        return cls(net, float(bound), norm or Normalizer.identity(state_dim))

    @property
    def control_dim(self) -> int:
        return self.net.n_out // 2

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.net.copy(), self.bound, self.norm)


@dataclass
class PolicyCache:
    acts: list
    pre: np.ndarray
    a: np.ndarray
    std: np.ndarray
    xi: np.ndarray
    clipped: np.ndarray


def policy_forward(policy: PolicyNet, x: np.ndarray, xi: np.ndarray):
    """Reparameterized sample ``u = bound * tanh(mean + std * xi)`` and its log-density."""
    out, acts = mlp_forward(policy.net, policy.norm(x), return_cache=True)
    k = policy.control_dim
    mean, raw = out[..., :k], out[..., k:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    pre = mean + std * xi
    a = np.tanh(pre)
    # log(1 - tanh(y)^2) = 2 * (log 2 - y - softplus(-2y))
    log_jac = 2.0 * (LOG2 - pre - softplus(-2.0 * pre))
    logp = np.sum(-0.5 * xi * xi - log_std - HALF_LOG_2PI - log_jac - np.log(policy.bound), axis=-1)
    cache = PolicyCache(acts, pre, a, std, xi, (raw < LOG_STD_MIN) | (raw > LOG_STD_MAX))
    return policy.bound * a, logp, cache


def policy_backward(policy: PolicyNet, cache: PolicyCache, g_u, g_logp):
    """Returns ``(GradientRecord, d_state)`` for upstream gradients on ``u`` and ``log_prob``."""
    g_logp = np.asarray(g_logp, dtype=np.float64)[..., None]
    g_pre = g_u * policy.bound * (1.0 - cache.a * cache.a) + g_logp * 2.0 * cache.a
    g_mean = g_pre
    g_logstd = g_pre * cache.std * cache.xi - g_logp
    g_logstd = np.where(cache.clipped, 0.0, g_logstd)
    grad, gx = mlp_vjp(policy.net, cache.acts, np.concatenate([g_mean, g_logstd], axis=-1))
    return grad, policy.norm.backward(gx)


def sample_action(policy: PolicyNet, x: np.ndarray, rng: np.random.Generator | None = None,
                  xi: np.ndarray | None = None, deterministic: bool = False):
    """Draw ``(u, log_prob)``. ``deterministic`` returns the squashed mean."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape[:-1] + (policy.control_dim,)
    if deterministic:
        xi = np.zeros(shape)
    elif xi is None:
        xi = rng.standard_normal(shape)
    u, logp, _ = policy_forward(policy, x, xi)
    return u, logp


def log_prob(policy: PolicyNet, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Density of a given bounded action (inverts the squashing)."""
    out = mlp_forward(policy.net, policy.norm(x))
    k = policy.control_dim
    mean, log_std = out[..., :k], np.clip(out[..., k:], LOG_STD_MIN, LOG_STD_MAX)
    pre = np.arctanh(np.asarray(u) / policy.bound)
    xi = (pre - mean) / np.exp(log_std)
    log_jac = 2.0 * (LOG2 - pre - softplus(-2.0 * pre))
    return np.sum(-0.5 * xi * xi - log_std - HALF_LOG_2PI - log_jac - np.log(policy.bound), axis=-1)


@dataclass
class QNet:
    """(state, control) -> scalar action value."""

    net: MlpParams
    norm: Normalizer

    @classmethod
    def create(cls, rng, state_dim, control_dim, hidden=(64, 64), norm=None):
        net = MlpParams.init([state_dim + control_dim, *hidden, 1], rng)
        return cls(net, norm or Normalizer.identity(state_dim + control_dim))

    def copy(self) -> "QNet":
        return QNet(self.net.copy(), self.norm)

    def __call__(self, x, u):
        return q_forward(self, x, u)[0]


def q_forward(q: QNet, x, u):
    z = np.concatenate([x, u], axis=-1)
    out, acts = mlp_forward(q.net, q.norm(z), return_cache=True)
    return out[..., 0], acts


def q_backward(q: QNet, acts, g, state_dim: int, need_params: bool = True):
    """Returns ``(GradientRecord, d_state, d_control)``."""
    grad, gz = mlp_vjp(q.net, acts, np.asarray(g)[..., None], need_params)
    gz = q.norm.backward(gz)
    return grad, gz[..., :state_dim], gz[..., state_dim:]


@dataclass
class LyapunovNet:
    """state -> softplus(mlp(state)) >= 0."""

    net: MlpParams
    norm: Normalizer

    @classmethod
    def create(cls, rng, state_dim, hidden=(64, 64), norm=None):
        return cls(MlpParams.init([state_dim, *hidden, 1], rng), norm or Normalizer.identity(state_dim))

    def copy(self) -> "LyapunovNet":
        return LyapunovNet(self.net.copy(), self.norm)

    def __call__(self, x):
        return lyapunov_forward(self, x)[0]


def lyapunov_forward(lyap: LyapunovNet, x):
    out, acts = mlp_forward(lyap.net, lyap.norm(x), return_cache=True)
    z = out[..., 0]
    return softplus(z), (acts, z)


def lyapunov_backward(lyap: LyapunovNet, cache, g, need_params: bool = True):
    acts, z = cache
    grad, gx = mlp_vjp(lyap.net, acts, (np.asarray(g) * sigmoid(z))[..., None], need_params)
    return grad, lyap.norm.backward(gx)


@dataclass
class CriticSet:
    q1: QNet
    q2: QNet
    q1_targ: QNet
    q2_targ: QNet
    lyapunov: LyapunovNet
    lyapunov_targ: LyapunovNet

    @classmethod
    def create(cls, rng, state_dim, control_dim, hidden=(64, 64), state_norm=None, u_max=1.0):
        snorm = state_norm or Normalizer.identity(state_dim)
        qnorm = Normalizer(np.concatenate([snorm.shift, np.zeros(control_dim)]),
                           np.concatenate([snorm.scale, np.full(control_dim, u_max)]))
        q1 = QNet.create(rng, state_dim, control_dim, hidden, qnorm)
        q2 = QNet.create(rng, state_dim, control_dim, hidden, qnorm)
        lyap = LyapunovNet.create(rng, state_dim, hidden, snorm)
        return cls(q1, q2, q1.copy(), q2.copy(), lyap, lyap.copy())


# ---------------------------------------------------------------- replay

@dataclass
class Transition:
    t: float
    x: np.ndarray
    u: np.ndarray
    r: float
    c: float
    x_next: np.ndarray
    done: bool = False


@dataclass
class Batch:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    r: np.ndarray
    c: np.ndarray
    x_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling over the filled region."""

    def __init__(self, capacity: int, state_dim: int, control_dim: int,
                 rng: np.random.Generator | None = None):
        self.capacity = int(capacity)
        self.rng = rng or np.random.default_rng(0)
        self.t = np.zeros(self.capacity)
        self.x = np.zeros((self.capacity, state_dim))
        self.u = np.zeros((self.capacity, control_dim))
        self.r = np.zeros(self.capacity)
        self.c = np.zeros(self.capacity)
        self.x_next = np.zeros((self.capacity, state_dim))
        self.done = np.zeros(self.capacity, dtype=bool)
        self.ptr = 0
        self.size = 0

    def add(self, tr: Transition) -> None:
        i = self.ptr
        self.t[i], self.x[i], self.u[i] = tr.t, tr.x, tr.u
        self.r[i], self.c[i], self.x_next[i], self.done[i] = tr.r, tr.c, tr.x_next, tr.done
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample_indices(self, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=n)

    def sample(self, n: int) -> Batch:
        i = self.sample_indices(n)
        return Batch(self.t[i], self.x[i], self.u[i], self.r[i], self.c[i], self.x_next[i], self.done[i])


# ---------------------------------------------------------------- losses

def q_loss(critics: CriticSet, policy: PolicyNet, alpha: float, batch: Batch, gamma: float,
           xi: np.ndarray, reward_scale: float = 1.0):
    """Twin soft Bellman errors against a shared target.

    Returns ``(loss1 + loss2, (grad_q1, grad_q2), info)``; the target is a constant.
    """
    n = len(batch)
    u_next, logp_next, _ = policy_forward(policy, batch.x_next, xi)
    qt = np.minimum(critics.q1_targ(batch.x_next, u_next), critics.q2_targ(batch.x_next, u_next))
    y = reward_scale * batch.r + gamma * (1.0 - batch.done) * (qt - alpha * logp_next)
    grads, total = [], 0.0
    for q in (critics.q1, critics.q2):
        pred, acts = q_forward(q, batch.x, batch.u)
        err = pred - y
        total += float(np.mean(err * err))
        grads.append(q_backward(q, acts, 2.0 * err / n, batch.x.shape[-1])[0])
    return total, tuple(grads), {"target_mean": float(y.mean())}


def lyapunov_loss(critics: CriticSet, batch: Batch, gamma_c: float, cost_scale: float = 1.0):
    """Squared TD error of the cost value network against its target copy."""
    n = len(batch)
    target = cost_scale * batch.c + gamma_c * (1.0 - batch.done) * critics.lyapunov_targ(batch.x_next)
    val, cache = lyapunov_forward(critics.lyapunov, batch.x)
    err = val - target
    grad, _ = lyapunov_backward(critics.lyapunov, cache, 2.0 * err / n)
    loss = float(np.mean(err * err))
    grad.loss = loss
    return loss, grad


def alpha_loss(log_alpha: float, log_probs: np.ndarray, target_entropy: float):
    """``J = -alpha * E[log pi + H]`` and its derivative with respect to ``log_alpha``."""
    alpha = np.exp(log_alpha)
    m = float(np.mean(log_probs + target_entropy))
    return -alpha * m, -alpha * m


def policy_objective_terms(policy: PolicyNet, critics: CriticSet, alpha: float, x: np.ndarray,
                           xi: np.ndarray):
    """``-V = E[alpha * log pi(u|x) - min_j Q_j(x, u)]`` with ``u`` reparameterized.

    Returns ``(value, d_u, d_logp, cache, u, log_prob)``. The action and
    log-prob gradients are kept apart so callers can add further
    action-dependent terms before the final :func:`policy_backward`.
    """
    n = x.shape[0]
    u, logp, cache = policy_forward(policy, x, xi)
    q1, a1 = q_forward(critics.q1, x, u)
    q2, a2 = q_forward(critics.q2, x, u)
    use1 = q1 <= q2
    qmin = np.where(use1, q1, q2)
    value = float(np.mean(alpha * logp - qmin))
    sd = x.shape[-1]
    _, _, gu1 = q_backward(critics.q1, a1, -use1.astype(float) / n, sd, False)
    _, _, gu2 = q_backward(critics.q2, a2, -(~use1).astype(float) / n, sd, False)
    return value, gu1 + gu2, np.full(n, alpha / n), cache, u, logp


def policy_objective(policy: PolicyNet, critics: CriticSet, alpha: float, x: np.ndarray,
                     xi: np.ndarray):
    value, g_u, g_logp, cache, _, _ = policy_objective_terms(policy, critics, alpha, x, xi)
    grad, _ = policy_backward(policy, cache, g_u, g_logp)
    grad.loss = value
    return value, grad


def target_update(online, target, tau: float) -> None:
    """Polyak averaging ``target <- tau * online + (1 - tau) * target`` in place."""
    if tau == 1.0:
        for t, o in zip(target.net.arrays(), online.net.arrays()):
            t[...] = o
        return
    for t, o in zip(target.net.arrays(), online.net.arrays()):
        t *= (1.0 - tau)
        t += tau * o


def critics_to_layers(critics: CriticSet) -> dict[str, np.ndarray]:
    layers = {}
    for name in ("q1", "q2", "q1_targ", "q2_targ", "lyapunov", "lyapunov_targ"):
        net = getattr(critics, name)
        layers.update(checkpoint.mlp_to_layers(name, net.net))
    layers.update(checkpoint.normalizer_to_layers("q.norm", critics.q1.norm))
    layers.update(checkpoint.normalizer_to_layers("lyapunov.norm", critics.lyapunov.norm))
    return layers


def critics_from_layers(layers) -> CriticSet:
    qn = checkpoint.normalizer_from_layers("q.norm", layers)
    ln = checkpoint.normalizer_from_layers("lyapunov.norm", layers)
    mk = lambda name: checkpoint.mlp_from_layers(name, layers, "tanh")
    return CriticSet(QNet(mk("q1"), qn), QNet(mk("q2"), qn), QNet(mk("q1_targ"), qn),
                     QNet(mk("q2_targ"), qn), LyapunovNet(mk("lyapunov"), ln),
                     LyapunovNet(mk("lyapunov_targ"), ln))


def policy_to_layers(prefix: str, policy: PolicyNet) -> dict[str, np.ndarray]:
    layers = checkpoint.mlp_to_layers(prefix, policy.net)
    layers.update(checkpoint.normalizer_to_layers(f"{prefix}.norm", policy.norm))
    layers[f"{prefix}.bound"] = np.array(policy.bound)
    return layers


def policy_from_layers(prefix: str, layers) -> PolicyNet:
    return PolicyNet(checkpoint.mlp_from_layers(prefix, layers, "tanh"),
                     float(layers[f"{prefix}.bound"]),
                     checkpoint.normalizer_from_layers(f"{prefix}.norm", layers))
