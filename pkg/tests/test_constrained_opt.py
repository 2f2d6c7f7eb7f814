import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlbac.actor_critic import CriticSet, PolicyNet, policy_objective
from nlbac.constrained_opt import (ConstraintValues, MultiplierState, backup_lagrangian,
                                   controller_loss, grow_penalty, primary_lagrangian, slack_reduce,
                                   update_multipliers)
from nlbac.diff_core import Normalizer
from nlbac.node_model import NodeModel
from nlbac.safety import CbfSpec, car_barriers


def ms(lp=(0.0, 0.0), zeta=0.0, lb=(0.0, 0.0), **kw):
    return MultiplierState(np.array(lp, float), zeta, np.array(lb, float), **kw)


# ------------------------------------------------------------------ slack

def test_slack_inactive():
    assert slack_reduce(0.5, 1.0, 2.0) == 0.5


def test_slack_active():
    assert slack_reduce(-0.5, 0.2, 2.0) == pytest.approx(-0.1)


def test_slack_zero_multiplier():
    assert slack_reduce(0.7, 0.0, 3.0) == 0.7


@settings(max_examples=100, deadline=None)
@given(f=st.floats(-10, 10), lam=st.floats(0, 10), c=st.floats(0.1, 100))
def test_slack_minimizes_penalty(f, lam, c):
    s = slack_reduce(f, lam, c)
    zs = np.linspace(0, 25, 2001)
    brute = np.min(lam * (f + zs) + 0.5 * c * (f + zs) ** 2)
    assert lam * s + 0.5 * c * s * s <= brute + 1e-9
    assert s >= f


# ------------------------------------------------------------------ Lagrangians

def test_primary_unconstrained_reduction():
    val, df, dg = primary_lagrangian(-3.25, np.zeros(2), 0.0, ms(c_p=5.0))
    assert val == -3.25
    np.testing.assert_array_equal(df, 0.0)
    assert dg == 0.0


def test_primary_single_constraint():
    val, _, _ = primary_lagrangian(0.0, np.array([1.0]), 0.0, ms(lp=(2.0,), lb=(0.0,), c_p=4.0))
    assert val == 4.0


def test_primary_clf_term():
    val, _, dg = primary_lagrangian(0.0, np.zeros(1), 1.0, ms(lp=(0.0,), zeta=2.0, lb=(0.0,), c_p=4.0))
    assert val == 4.0 and dg == 2.0 + 4.0


def test_backup_reductions():
    assert backup_lagrangian(-1.5, np.zeros(2), ms(c_b=7.0))[0] == -1.5
    val, df = backup_lagrangian(0.0, np.array([1.0]), ms(lp=(0.0,), lb=(2.0,), c_b=4.0))
    assert val == 4.0 and df[0] == 6.0
    # zeta plays no part in the backup objective
    assert backup_lagrangian(0.0, np.zeros(1), ms(lp=(0.0,), zeta=9.0, lb=(0.0,)))[0] == 0.0


@settings(max_examples=60, deadline=None)
@given(f=st.floats(-3, 3), lam=st.floats(0, 5), c=st.floats(0.5, 20))
def test_penalty_derivative_matches_fd(f, lam, c):
    state = ms(lp=(lam,), lb=(0.0,), c_p=c)
    if abs(f + lam / c) < 1e-4:
        return  # kink of the reduced penalty
    _, df, _ = primary_lagrangian(0.0, np.array([f]), 0.0, state)
    eps = 1e-7
    fd = (primary_lagrangian(0.0, np.array([f + eps]), 0.0, state)[0]
          - primary_lagrangian(0.0, np.array([f - eps]), 0.0, state)[0]) / (2 * eps)
    assert df[0] == pytest.approx(fd, rel=1e-5, abs=1e-7)


# ------------------------------------------------------------------ multipliers and penalty

def test_multiplier_update_raw_residual():
    out = update_multipliers(ms(lp=(0.5, 0.0), c_p=2.0), ConstraintValues(np.array([-0.1, -50.0]), 0.0,
                                                                          np.zeros(2)))
    np.testing.assert_allclose(out.lambda_p, [0.3, 0.0])


def test_multiplier_zero_residual_unchanged():
    state = ms(lp=(0.4, 1.1), zeta=0.2, lb=(0.3, 0.0), c_p=2.0, c_b=3.0)
    out = update_multipliers(state, ConstraintValues(np.zeros(2), 0.0, np.zeros(2)))
    np.testing.assert_array_equal(out.lambda_p, state.lambda_p)
    assert out.zeta == state.zeta
    back = update_multipliers(state, ConstraintValues(np.zeros(2), 0.0, np.zeros(2)), "backup")
    np.testing.assert_array_equal(back.lambda_b, state.lambda_b)
    with pytest.raises(ValueError):
        update_multipliers(state, ConstraintValues(np.zeros(2), 0.0, np.zeros(2)), "other")


def test_backup_update_leaves_primary_alone():
    state = ms(lp=(0.4, 1.1), zeta=0.2, c_b=2.0)
    out = update_multipliers(state, ConstraintValues(np.ones(2), 1.0, np.array([0.5, 1.0])), "backup")
    np.testing.assert_array_equal(out.lambda_p, state.lambda_p)
    np.testing.assert_allclose(out.lambda_b, [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(lam=st.lists(st.floats(0, 100), min_size=2, max_size=2), zeta=st.floats(0, 100),
       f=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), g=st.floats(-1e3, 1e3),
       c=st.floats(0.01, 1e3))
def test_multipliers_stay_non_negative(lam, zeta, f, g, c):
    out = update_multipliers(ms(lp=lam, zeta=zeta, c_p=c, c_max=1e3),
                             ConstraintValues(np.array(f), g, np.zeros(2)))
    assert np.all(out.lambda_p >= 0) and out.zeta >= 0


def test_penalty_growth():
    assert grow_penalty(ms(c_p=1.0, rho_c=1.0001)).c_p == pytest.approx(1.0001)
    assert grow_penalty(ms(c_p=1e3, c_max=1e3)).c_p == 1e3
    assert grow_penalty(ms(c_b=2.0, rho_c=1.5), "backup").c_b == 3.0
    with pytest.raises(ValueError):
        ms(rho_c=1.0)


@settings(max_examples=30, deadline=None)
@given(rho=st.floats(1.0001, 3.0), n=st.integers(1, 200))
def test_penalty_monotone_and_capped(rho, n):
    state = ms(c_p=1.0, rho_c=rho, c_max=50.0)
    prev = state.c_p
    for _ in range(n):
        state = grow_penalty(state)
        assert prev <= state.c_p <= 50.0
        prev = state.c_p


def test_negative_multiplier_rejected():
    with pytest.raises(ValueError):
        ms(lp=(-0.1, 0.0))


# ------------------------------------------------------------------ full controller loss

@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    norm = Normalizer(rng.normal(size=10) * 3, np.full(10, 5.0))
    pol = PolicyNet.create(rng, 10, 1, 20.0, hidden=(6,), norm=norm)
    crit = CriticSet.create(rng, 10, 1, hidden=(6,), state_norm=norm, u_max=20.0)
    node = NodeModel.create(rng, hidden=(6,))
    b = 6
    x = rng.normal(size=(b, 10)) * 2
    x[:, 4] += 4   # put samples near the barrier boundaries
    x[:, 8] -= 4
    t = rng.uniform(0, 3, b)
    xi0, xi1 = rng.normal(size=(b, 1)), rng.normal(size=(b, 1))
    spec = CbfSpec.uniform(car_barriers(3.5), 2, 0.2)
    state = ms(lp=(0.7, 1.2), zeta=0.5, lb=(0.3, 0.4), c_p=3.0, c_b=2.0)
    return pol, crit, node, x, t, xi0, xi1, spec, state


@pytest.mark.parametrize("kind", ["primary", "backup"])
def test_controller_loss_matches_fd(setup, kind):
    pol, crit, node, x, t, xi0, xi1, spec, state = setup
    args = (crit, 0.3, x, t, xi0, xi1, node, spec, state, 0.1, kind)
    res = controller_loss(pol, *args)
    assert np.any(res.f > 0), "fixture should activate some constraint"
    th = pol.net.flat()
    eps = 1e-6
    fd = np.empty_like(th)
    for i in range(th.size):
        vals = []
        for d in (eps, -eps):
            v = th.copy()
            v[i] += d
            vals.append(controller_loss(PolicyNet(pol.net.with_flat(v), pol.bound, pol.norm), *args).value)
        fd[i] = (vals[0] - vals[1]) / (2 * eps)
    err = np.max(np.abs(res.grad.flat() - fd)) / np.max(np.abs(fd))
    assert err < 1e-5


def test_zero_constraints_is_plain_objective(setup):
    pol, crit, node, x, t, xi0, xi1, spec, state = setup
    res = controller_loss(pol, crit, 0.3, x, t, xi0, xi1, node, spec, state, 0.1, "primary",
                          zero_constraints=True)
    value, grad = policy_objective(pol, crit, 0.3, x, xi0)
    assert res.value == value
    np.testing.assert_array_equal(res.grad.flat(), grad.flat())
    np.testing.assert_array_equal(res.f, 0.0)


def test_backup_ignores_clf(setup):
    pol, crit, node, x, t, xi0, xi1, spec, state = setup
    res = controller_loss(pol, crit, 0.3, x, t, xi0, xi1, node, spec, state, 0.1, "backup")
    assert res.g == 0.0
