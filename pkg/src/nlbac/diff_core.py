"""Small-MLP reverse-mode differentiation and fixed-step ODE integration.

Everything is float64 numpy. Networks are plain lists of weight matrices
and bias vectors; the backward pass is written out by hand, one layer at a
time. The integrator keeps a tape of every Runge-Kutta stage so gradients
flow back through the unrolled steps (discretize-then-optimize).

Batching convention: an input of shape ``(n,)`` is a single sample, an
input of shape ``(B, n)`` is a batch. Parameter gradients are summed over
the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class InvalidInputError(ValueError):
    """Raised on shape or configuration mismatches."""


class NumericOverflowError(ArithmeticError):
    def __init__(self, substep: int, message: str = "non-finite state"):
        self.substep = substep
        super().__init__(f"{message} at integrator substep {substep}")


@dataclass
class MlpParams:
    """Fully connected network: hidden layers use ``activation``, output is linear.

    ``weights[l]`` has shape ``(layer_sizes[l+1], layer_sizes[l])``.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if len(self.layer_sizes) < 2 or any(int(s) <= 0 for s in self.layer_sizes):
            raise InvalidInputError(f"bad layer sizes {self.layer_sizes}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise InvalidInputError("one weight matrix and bias vector per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != want or b.shape != (want[0],):
                raise InvalidInputError(f"layer {l}: got W{w.shape} b{b.shape}, want W{want}")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: np.random.Generator,
             activation: str = "tanh") -> "MlpParams":
        """Uniform init in +-1/sqrt(fan_in) for weights and biases."""
        sizes = [int(s) for s in layer_sizes]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(sizes, weights, biases, activation)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], activation: str = "tanh") -> "MlpParams":
        sizes = [int(s) for s in layer_sizes]
        return cls(sizes, [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(o) for o in sizes[1:]], activation)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out = self.copy()
        pos = 0
        for a in out.arrays():
            a[...] = np.reshape(vec[pos:pos + a.size], a.shape)
            pos += a.size
        if pos != vec.size:
            raise InvalidInputError(f"flat vector has {vec.size} entries, expected {pos}")
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class GradientRecord:
    """Gradients congruent with an :class:`MlpParams`, plus the loss they came from."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float = 0.0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradientRecord":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def __add__(self, other: "GradientRecord | None") -> "GradientRecord":
        if other is None:
            return self
        return GradientRecord([a + b for a, b in zip(self.weights, other.weights)],
                              [a + b for a, b in zip(self.biases, other.biases)],
                              self.loss + other.loss)

    __radd__ = __add__

    def scaled(self, k: float) -> "GradientRecord":
        return GradientRecord([k * w for w in self.weights], [k * b for b in self.biases],
                              self.loss)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.n_in:
        raise InvalidInputError(f"input shape {x.shape} does not match n_in={params.n_in}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Evaluate the network. With ``return_cache`` also return what backward needs."""
    x = _check_input(params, x)
    acts = [x]
    a = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if l < last:
            a = np.tanh(z) if params.activation == "tanh" else np.maximum(z, 0.0)
        else:
            a = z
        acts.append(a)
    if return_cache:
        return a, acts
    return a


def mlp_vjp(params: MlpParams, acts: list[np.ndarray], upstream: np.ndarray,
            need_params: bool = True):
    """Backward pass from a forward cache. Returns ``(GradientRecord, d_input)``.

    With ``need_params=False`` only the input gradient is formed and the
    record is ``None``.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise InvalidInputError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    batched = g.ndim == 2
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for l in range(n - 1, -1, -1):
        a_prev = acts[l]
        if not need_params:
            pass
        elif batched:
            gw[l] = g.T @ a_prev
            gb[l] = g.sum(axis=0)
        else:
            gw[l] = np.outer(g, a_prev)
            gb[l] = g.copy()
        g = g @ params.weights[l]
        if l > 0:
            if params.activation == "tanh":
                g = g * (1.0 - a_prev * a_prev)
            else:
                g = g * (a_prev > 0.0)
    return (GradientRecord(gw, gb) if need_params else None), g


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray):
    """Gradient of ``upstream . mlp(x)`` wrt parameters and input."""
    _, acts = mlp_forward(params, x, return_cache=True)
    return mlp_vjp(params, acts, upstream)


@dataclass(frozen=True)
class Normalizer:
    """Fixed affine input map ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, data: np.ndarray, min_scale: float = 1e-3) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), min_scale))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift) / self.scale

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g / self.scale


# ---------------------------------------------------------------- integration

@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk4"
    substeps_per_interval: int = 1
    interval_length: float = 0.02

    def __post_init__(self):
        if self.scheme not in ("rk4", "euler"):
            raise InvalidInputError(f"unknown scheme {self.scheme!r}")
        if int(self.substeps_per_interval) < 1:
            raise InvalidInputError("substeps_per_interval must be >= 1")
        if not self.interval_length > 0:
            raise InvalidInputError("interval_length must be positive")

    @property
    def h(self) -> float:
        return self.interval_length / self.substeps_per_interval


class VectorField(Protocol):
    """A field ``f(t, x, u)`` that can also back-propagate.

    ``backward`` returns ``(param_grad or None, d_x, d_u)``.
    """

    def forward(self, t, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, Any]: ...

    def backward(self, cache: Any, upstream: np.ndarray) -> tuple[Any, np.ndarray, np.ndarray]: ...


def _eval(field, t, x, u, keep: bool):
    if hasattr(field, "forward"):
        dx, cache = field.forward(t, x, u)
        return dx, (cache if keep else None)
    if keep:
        raise InvalidInputError("gradients need a field with forward/backward")
    return np.asarray(field(t, x, u), dtype=np.float64), None


@dataclass
class Tape:
    config: IntegratorConfig
    stages: list[list[Any]] = field(default_factory=list)


def _run(field, x0, u, config: IntegratorConfig, t0, keep: bool):
    x = np.array(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericOverflowError(0, "non-finite initial state")
    u = np.asarray(u, dtype=np.float64)
    h = config.h
    tape = Tape(config) if keep else None
    t = t0
    for s in range(config.substeps_per_interval):
        if config.scheme == "rk4":
            k1, c1 = _eval(field, t, x, u, keep)
            k2, c2 = _eval(field, t + 0.5 * h, x + 0.5 * h * k1, u, keep)
            k3, c3 = _eval(field, t + 0.5 * h, x + 0.5 * h * k2, u, keep)
            k4, c4 = _eval(field, t + h, x + h * k3, u, keep)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            caches = [c1, c2, c3, c4]
        else:
            k1, c1 = _eval(field, t, x, u, keep)
            x = x + h * k1
            caches = [c1]
        if not np.all(np.isfinite(x)):
            raise NumericOverflowError(s + 1)
        if keep:
            tape.stages.append(caches)
        t = t + h
    return x, tape


def integrate(field: VectorField | Callable, x0: np.ndarray, u: np.ndarray,
              config: IntegratorConfig, t0: float | np.ndarray = 0.0) -> np.ndarray:
    """Advance ``x0`` by one interval with ``u`` held constant."""
    return _run(field, x0, u, config, t0, keep=False)[0]


def integrate_with_tape(field: VectorField, x0: np.ndarray, u: np.ndarray,
                        config: IntegratorConfig, t0: float | np.ndarray = 0.0):
    return _run(field, x0, u, config, t0, keep=True)


def integrate_backward(field: VectorField, tape: Tape, upstream: np.ndarray):
    """Reverse sweep through a tape: returns ``(param_grad, d_x0, d_u)``."""
    h = tape.config.h
    gx = np.array(upstream, dtype=np.float64)
    gparam = None
    gu = None

    def acc(dp, du):
        nonlocal gparam, gu
        gparam = dp if gparam is None else gparam + dp
        gu = du if gu is None else gu + du

    for caches in reversed(tape.stages):
        if tape.config.scheme == "rk4":
            c1, c2, c3, c4 = caches
            gk4 = (h / 6.0) * gx
            gk3 = (h / 3.0) * gx
            gk2 = (h / 3.0) * gx
            gk1 = (h / 6.0) * gx
            dp, dx4, du = field.backward(c4, gk4)
            acc(dp, du)
            gx = gx + dx4
            gk3 = gk3 + h * dx4
            dp, dx3, du = field.backward(c3, gk3)
            acc(dp, du)
            gx = gx + dx3
            gk2 = gk2 + 0.5 * h * dx3
            dp, dx2, du = field.backward(c2, gk2)
            acc(dp, du)
            gx = gx + dx2
            gk1 = gk1 + 0.5 * h * dx2
            dp, dx1, du = field.backward(c1, gk1)
            acc(dp, du)
            gx = gx + dx1
        else:
            (c1,) = caches
            dp, dx1, du = field.backward(c1, h * gx)
            acc(dp, du)
            gx = gx + dx1
    return gparam, gx, gu


# ---------------------------------------------------------------- optimizers

class SGD:
    """Plain gradient descent, in place."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: MlpParams, grad: GradientRecord) -> None:
        for p, g in zip(params.arrays(), grad.arrays()):
            p -= self.lr * g


class Adam:
    """Per-parameter adaptive step sizes, in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: MlpParams, grad: GradientRecord) -> None:
        arrays = params.arrays()
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, g, m, v in zip(arrays, grad.arrays(), self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr_t * m / (np.sqrt(v) + self.eps)


class ScalarAdam:
    """Adam for a single scalar (used for log-entropy coefficients)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t, self.m, self.v = 0, 0.0, 0.0

    def step(self, value: float, grad: float) -> float:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class ScalarSGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, value: float, grad: float) -> float:
        return value - self.lr * grad


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise InvalidInputError(f"unknown optimizer {kind!r}")


def make_scalar_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return ScalarSGD(lr)
    if kind == "adam":
        return ScalarAdam(lr)
    raise InvalidInputError(f"unknown optimizer {kind!r}")
