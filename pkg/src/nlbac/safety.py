"""Discrete-time barrier chains, the Lyapunov decrease residual, and ReLU aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diff_core import InvalidInputError


@dataclass(frozen=True)
class LinearBarrier:
    """``h(x) = coef . x + offset``; gradient is ``coef`` everywhere."""

    coef: np.ndarray
    offset: float = 0.0

    def __call__(self, x: np.ndarray):
        return np.asarray(x) @ self.coef + self.offset

    def grad(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.coef, np.shape(x))


def car_barriers(delta: float, state_dim: int = 10) -> list[LinearBarrier]:
    """``h1 = p3 - p4 - delta`` and ``h2 = p4 - p5 - delta``."""
    c1 = np.zeros(state_dim)
    c1[4], c1[6] = 1.0, -1.0
    c2 = np.zeros(state_dim)
    c2[6], c2[8] = 1.0, -1.0
    return [LinearBarrier(c1, -delta), LinearBarrier(c2, -delta)]


@dataclass
class CbfSpec:
    """Barrier functions with a common relative degree and linear class-K gains.

    ``gains[i][j]`` is the slope of the class-K function applied at level ``j+1``
    of constraint ``i``.
    """

    barriers: Sequence[Callable]
    relative_degree: int
    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.gains.ndim == 1:
            self.gains = np.tile(self.gains, (len(self.barriers), 1))
        if self.relative_degree < 1:
            raise InvalidInputError("relative degree must be >= 1")
        if self.gains.shape != (len(self.barriers), self.relative_degree):
            raise InvalidInputError(f"gains shape {self.gains.shape} != "
                                    f"({len(self.barriers)}, {self.relative_degree})")
        if np.any(self.gains <= 0) or np.any(self.gains > 1):
            raise InvalidInputError("class-K gains must lie in (0, 1]")

    @classmethod
    def uniform(cls, barriers, relative_degree: int, gain: float = 0.2) -> "CbfSpec":
        return cls(barriers, relative_degree, np.full((len(barriers), relative_degree), gain))

    @property
    def m(self) -> int:
        return len(self.barriers)


def chain_weights(gains: Sequence[float]) -> np.ndarray:
    """Coefficients ``w`` with ``Phi_r(x_k) = sum_j w[j] * h(x_{k+j})``.

    Unrolls ``Phi_j(x_k) = Phi_{j-1}(x_{k+1}) - Phi_{j-1}(x_k) + g_j * Phi_{j-1}(x_k)``
    for linear class-K functions.
    """
    r = len(gains)
    # level[k] holds the coefficients of Phi_j evaluated at x_{k}
    level = [np.eye(r + 1)[k] for k in range(r + 1)]
    for j, g in enumerate(gains):
        level = [level[k + 1] + (g - 1.0) * level[k] for k in range(len(level) - 1)]
    return level[0]


def phi_chain(spec: CbfSpec, predicted: Sequence[np.ndarray]) -> np.ndarray:
    """``Phi_{i,r}`` at the first state of ``predicted`` for every barrier.

    ``predicted`` holds ``r + 1`` states (first one observed, rest predicted);
    each may be a single state or a batch. Output has a trailing axis of size m.
    """
    r = spec.relative_degree
    if len(predicted) < r + 1:
        raise InvalidInputError(f"need {r + 1} states for relative degree {r}, got {len(predicted)}")
    out = []
    for i, h in enumerate(spec.barriers):
        w = chain_weights(spec.gains[i])
        out.append(sum(w[j] * np.asarray(h(predicted[j]), dtype=np.float64) for j in range(r + 1)))
    return np.stack(out, axis=-1)


def phi_chain_grad(spec: CbfSpec, predicted: Sequence[np.ndarray], upstream: np.ndarray):
    """Gradient of ``sum(upstream * phi_chain(...))`` wrt each state in ``predicted``."""
    r = spec.relative_degree
    grads = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in predicted[:r + 1]]
    for i, h in enumerate(spec.barriers):
        w = chain_weights(spec.gains[i])
        up = upstream[..., i]
        for j in range(r + 1):
            grads[j] = grads[j] + (w[j] * up)[..., None] * h.grad(predicted[j])
    return grads


def clf_residual(lyapunov: Callable, x: np.ndarray, x_next: np.ndarray, beta: float):
    """``L(x_next) - L(x) + beta * L(x)``; non-positive means the decrease condition holds."""
    if not beta > 0:
        raise InvalidInputError("beta must be positive")
    lx = lyapunov(x)
    return lyapunov(x_next) - lx + beta * lx


@dataclass
class ConstraintBatch:
    """Per-sample ``-Phi_{i,r}`` (shape ``(B, m)``) and CLF residuals (shape ``(B,)``)."""

    cbf_residuals: np.ndarray
    clf_residuals: np.ndarray | None = None
    beta: float = 0.1

    def __post_init__(self):
        self.cbf_residuals = np.atleast_2d(np.asarray(self.cbf_residuals, dtype=np.float64))
        if self.clf_residuals is not None:
            self.clf_residuals = np.asarray(self.clf_residuals, dtype=np.float64).reshape(-1)
            if len(self.clf_residuals) != len(self.cbf_residuals):
                raise InvalidInputError("cbf and clf residuals must share the batch axis")
        if not self.beta > 0:
            raise InvalidInputError("beta must be positive")


@dataclass
class Aggregate:
    f: np.ndarray
    g: float
    f_signed: np.ndarray
    g_signed: float


def aggregate(batch: ConstraintBatch) -> Aggregate:
    """Mean of ReLU per sample, for each barrier residual and the CLF residual."""
    if len(batch.cbf_residuals) == 0:
        raise InvalidInputError("empty constraint batch")
    f = np.maximum(batch.cbf_residuals, 0.0).mean(axis=0)
    fs = batch.cbf_residuals.mean(axis=0)
    if batch.clf_residuals is None:
        return Aggregate(f, 0.0, fs, 0.0)
    g = float(np.maximum(batch.clf_residuals, 0.0).mean())
    return Aggregate(f, g, fs, float(batch.clf_residuals.mean()))


def relu_mean_grad(residuals: np.ndarray) -> np.ndarray:
    """d mean(relu(r)) / d r, with subgradient 0 at r == 0."""
    return (residuals > 0.0) / residuals.shape[0]
