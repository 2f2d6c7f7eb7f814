"""Augmented Lagrangians for the primary and backup controllers.

Slack variables are eliminated in closed form: minimizing
``lam * (f + z2) + c/2 * (f + z2)**2`` over ``z2 >= 0`` gives the effective
residual ``max(f, -lam / c)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .actor_critic import (CriticSet, LyapunovNet, PolicyNet, lyapunov_backward,
                           lyapunov_forward, policy_backward, policy_forward,
                           policy_objective_terms)
from .diff_core import integrate_backward, integrate_with_tape
from .node_model import NodeModel
from .safety import CbfSpec, ConstraintBatch, aggregate, phi_chain, phi_chain_grad, relu_mean_grad


@dataclass
class MultiplierState:
    lambda_p: np.ndarray
    zeta: float
    lambda_b: np.ndarray
    c_p: float = 1.0
    c_b: float = 1.0
    rho_c: float = 1.0002
    c_max: float = 1e3

    def __post_init__(self):
        self.lambda_p = np.asarray(self.lambda_p, dtype=np.float64)
        self.lambda_b = np.asarray(self.lambda_b, dtype=np.float64)
        if not self.rho_c > 1.0:
            raise ValueError("rho_c must be > 1")
        if not (0 < self.c_p <= self.c_max and 0 < self.c_b <= self.c_max):
            raise ValueError("penalty coefficients must lie in (0, c_max]")
        if np.any(self.lambda_p < 0) or np.any(self.lambda_b < 0) or self.zeta < 0:
            raise ValueError("multipliers must be non-negative")

    @classmethod
    def initial(cls, m: int, **kw) -> "MultiplierState":
        return cls(np.zeros(m), 0.0, np.zeros(m), **kw)


@dataclass
class ConstraintValues:
    f_p: np.ndarray
    g: float
    f_b: np.ndarray


def slack_reduce(f, lam, c):
    """Residual after the optimal slack: ``f + z*^2`` with ``z*^2 = max(0, -lam/c - f)``."""
    return np.maximum(f, -np.asarray(lam) / c)


def _penalty(f, lam, c):
    """Value of ``lam*s + c/2*s^2`` at the reduced residual and its derivative wrt ``f``."""
    f = np.asarray(f, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    s = slack_reduce(f, lam, c)
    value = lam * s + 0.5 * c * s * s
    dval = np.where(f > -lam / c, lam + c * s, 0.0)
    return value, dval


def primary_lagrangian(neg_value: float, f_p, g: float, ms: MultiplierState):
    """Primary controller Lagrangian ``-V + CBF terms + CLF term``.

    Returns ``(value, d/df_p, d/dg)``; multiplier and penalty are held fixed.
    """
    vf, df = _penalty(f_p, ms.lambda_p, ms.c_p)
    vg, dg = _penalty(g, ms.zeta, ms.c_p)
    return float(neg_value + vf.sum() + vg), df, float(dg)


def backup_lagrangian(neg_value: float, f_b, ms: MultiplierState):
    """Backup controller Lagrangian: safety terms only."""
    vf, df = _penalty(f_b, ms.lambda_b, ms.c_b)
    return float(neg_value + vf.sum()), df


def update_multipliers(ms: MultiplierState, values: ConstraintValues, which: str = "primary"
                       ) -> MultiplierState:
    """Projected ascent ``lam <- max(0, lam + c * f)``."""
    if which == "primary":
        return replace(ms, lambda_p=np.maximum(0.0, ms.lambda_p + ms.c_p * np.asarray(values.f_p)),
                       zeta=float(max(0.0, ms.zeta + ms.c_p * values.g)))
    if which == "backup":
        return replace(ms, lambda_b=np.maximum(0.0, ms.lambda_b + ms.c_b * np.asarray(values.f_b)))
    raise ValueError(f"unknown multiplier group {which!r}")


def grow_penalty(ms: MultiplierState, which: str = "primary") -> MultiplierState:
    if which == "primary":
        return replace(ms, c_p=min(ms.rho_c * ms.c_p, ms.c_max))
    return replace(ms, c_b=min(ms.rho_c * ms.c_b, ms.c_max))


# ------------------------------------------------- differentiable controller loss

@dataclass
class ControllerLossResult:
    value: float
    grad: object
    neg_v: float
    f: np.ndarray
    g: float
    f_signed: np.ndarray
    g_signed: float
    log_prob: np.ndarray = field(repr=False, default=None)


def controller_loss(policy: PolicyNet, critics: CriticSet, alpha: float, x: np.ndarray,
                    t: np.ndarray, xi0: np.ndarray, xi1: np.ndarray, node: NodeModel,
                    spec: CbfSpec, ms: MultiplierState, beta: float = 0.1,
                    kind: str = "primary", zero_constraints: bool = False) -> ControllerLossResult:
    """Augmented Lagrangian of one controller and its gradient w.r.t. the policy.

    The policy acts at the sampled states (noise ``xi0``); the learned model
    predicts two steps ahead, the second one using a fresh policy action at the
    predicted state (noise ``xi1``). Barrier chains use these predictions; the
    primary controller also gets the Lyapunov decrease residual at the first
    predicted state. With ``zero_constraints`` the constraint values are forced
    to zero and no constraint gradient is formed.
    """
    neg_v, g_u, g_logp, cache0, u0, logp0 = policy_objective_terms(policy, critics, alpha, x, xi0)
    m = spec.m
    primary = kind == "primary"
    if zero_constraints:
        f = np.zeros(m)
        g = 0.0
        fs, gs = np.zeros(m), 0.0
        need_constraint_grad = False
        parts = None
    else:
        parts = _forward_constraints(policy, critics.lyapunov, x, t, u0, xi1, node, spec, beta, primary)
        agg = aggregate(parts["batch"])
        f, g, fs, gs = agg.f, agg.g, agg.f_signed, agg.g_signed
    if primary:
        value, df, dg = primary_lagrangian(neg_v, f, g, ms)
    else:
        value, df = backup_lagrangian(neg_v, f, ms)
        dg = 0.0
    if not zero_constraints:
        need_constraint_grad = bool(np.any(df != 0.0) or dg != 0.0)
    if need_constraint_grad:
        g_u = g_u + _backward_constraints(policy, critics.lyapunov, node, spec, parts, df, dg)
    grad, _ = policy_backward(policy, cache0, g_u, g_logp)
    if need_constraint_grad and parts["grad_theta_1"] is not None:
        grad = grad + parts["grad_theta_1"]
    grad.loss = value
    return ControllerLossResult(value, grad, neg_v, np.asarray(f), float(g), np.asarray(fs),
                                float(gs), logp0)


def _forward_constraints(policy, lyap: LyapunovNet, x, t, u0, xi1, node, spec, beta, primary):
    fld = node.field(param_grads=False)
    dt = node.integrator.interval_length
    x1, tape1 = integrate_with_tape(fld, x, u0, node.integrator, t0=t)
    u1, _, cache1 = policy_forward(policy, x1, xi1)
    x2, tape2 = integrate_with_tape(fld, x1, u1, node.integrator, t0=t + dt)
    states = [x, x1, x2][:spec.relative_degree + 1]
    cbf = -phi_chain(spec, states)
    clf = None
    lcache = None
    if primary:
        l1, lcache = lyapunov_forward(lyap, x1)
        l0 = lyap(x)
        clf = l1 - l0 + beta * l0
    batch = ConstraintBatch(cbf, clf, beta)
    return {"batch": batch, "states": states, "tape1": tape1, "tape2": tape2,
            "cache1": cache1, "lcache": lcache, "grad_theta_1": None}


def _backward_constraints(policy, lyap, node, spec, parts, df, dg):
    """Gradient of ``sum(df * f) + dg * g`` w.r.t. the first action; policy grads
    from the second action are stored in ``parts['grad_theta_1']``."""
    fld = node.field(param_grads=False)
    batch = parts["batch"]
    # f_i = mean relu(-Phi_i) -> d/dPhi_i = -df_i * mask / B
    up_phi = -relu_mean_grad(batch.cbf_residuals) * df
    gstates = phi_chain_grad(spec, parts["states"], up_phi)
    g_x1 = gstates[1] if len(gstates) > 1 else np.zeros_like(parts["states"][0])
    if batch.clf_residuals is not None and dg != 0.0:
        up_l = relu_mean_grad(batch.clf_residuals[:, None])[:, 0] * dg
        _, gl = lyapunov_backward(lyap, parts["lcache"], up_l, need_params=False)
        g_x1 = g_x1 + gl
    if len(gstates) > 2:
        _, gx1_from2, gu1 = integrate_backward(fld, parts["tape2"], gstates[2])
        gtheta1, gx1_pol = policy_backward(policy, parts["cache1"], gu1, np.zeros(gu1.shape[0]))
        parts["grad_theta_1"] = gtheta1
        g_x1 = g_x1 + gx1_from2 + gx1_pol
    _, _, gu0 = integrate_backward(fld, parts["tape1"], g_x1)
    return gu0
