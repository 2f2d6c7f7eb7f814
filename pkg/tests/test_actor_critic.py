import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm as gaussian

from nlbac.actor_critic import (Batch, CriticSet, LyapunovNet, PolicyNet, QNet, ReplayBuffer,
                                Transition, alpha_loss, critics_from_layers, critics_to_layers, log_prob,
                                lyapunov_loss, policy_backward, policy_forward,
                                policy_from_layers, policy_objective, policy_to_layers, q_loss,
                                sample_action, target_update)
from nlbac.diff_core import MlpParams, Normalizer, mlp_forward

SD = 3


def const_policy(mean, log_std, bound=2.0):
    net = MlpParams([SD, 2], [np.zeros((2, SD))], [np.array([mean, log_std], dtype=float)])
    return PolicyNet(net, bound, Normalizer.identity(SD))


def const_q(value):
    return QNet(MlpParams([SD + 1, 1], [np.zeros((1, SD + 1))], [np.array([value], float)]),
                Normalizer.identity(SD + 1))


def const_lyap(value):
    z = np.log(np.expm1(value))
    return LyapunovNet(MlpParams([SD, 1], [np.zeros((1, SD))], [np.array([z])]),
                       Normalizer.identity(SD))


def critics_with(q1, q2, lyap=None):
    lyap = lyap or const_lyap(1.0)
    return CriticSet(q1, q2, q1.copy(), q2.copy(), lyap, lyap.copy())


def random_setup(seed, hidden=(5,)):
    rng = np.random.default_rng(seed)
    norm = Normalizer(rng.normal(size=SD), rng.uniform(0.5, 2, SD))
    pol = PolicyNet.create(rng, SD, 1, 2.0, hidden, norm)
    crit = CriticSet.create(rng, SD, 1, hidden, norm, 2.0)
    for net in (crit.q1_targ, crit.q2_targ, crit.lyapunov_targ):
        for a in net.net.arrays():
            a += rng.normal(scale=0.1, size=a.shape)
    return rng, pol, crit


def make_batch(rng, n=6):
    return Batch(np.zeros(n), rng.normal(size=(n, SD)), rng.uniform(-1.9, 1.9, size=(n, 1)),
                 rng.normal(size=n), rng.uniform(0, 2, size=n), rng.normal(size=(n, SD)),
                 np.zeros(n, dtype=bool))


def fd_policy(pol, f, eps=1e-6):
    base = pol.net.flat()
    out = np.empty_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (f(PolicyNet(pol.net.with_flat(up), pol.bound, pol.norm))
                  - f(PolicyNet(pol.net.with_flat(dn), pol.bound, pol.norm))) / (2 * eps)
    return out


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


# ------------------------------------------------------------------ policy

def test_deterministic_limit():
    pol = const_policy(0.4, -25.0)
    x = np.zeros((3, SD))
    u1, _ = sample_action(pol, x, np.random.default_rng(0))
    u2, _ = sample_action(pol, x, np.random.default_rng(1))
    # std is clamped at exp(-20), so noise still moves u by ~1e-9
    np.testing.assert_allclose(u1, 2.0 * np.tanh(0.4), atol=1e-8)
    np.testing.assert_allclose(u1, u2, atol=1e-8)
    np.testing.assert_array_equal(u1, sample_action(pol, x, np.random.default_rng(0))[0])
    ud, _ = sample_action(pol, x, deterministic=True)
    np.testing.assert_array_equal(ud, 2.0 * np.tanh(np.full((3, 1), 0.4)))


def test_zero_net_symmetric_samples():
    pol = PolicyNet(MlpParams.zeros([SD, 8, 2]), 20.0, Normalizer.identity(SD))
    u, _ = sample_action(pol, np.zeros((10_000, SD)), np.random.default_rng(3))
    assert abs(u.mean() / pol.bound) < 0.05


def test_log_prob_matches_cdf_derivative():
    mean, log_std, b = 0.3, -0.4, 2.0
    pol = const_policy(mean, log_std, b)
    cdf = lambda u: gaussian.cdf((np.arctanh(u / b) - mean) / np.exp(log_std))
    grid = np.linspace(-0.95 * b, 0.95 * b, 41)
    h = 1e-6
    dens = (cdf(grid + h) - cdf(grid - h)) / (2 * h)
    got = np.exp(log_prob(pol, np.zeros((len(grid), SD)), grid[:, None]))
    np.testing.assert_allclose(got, dens, rtol=1e-3)


def test_forward_log_prob_agrees_with_inverse():
    rng, pol, _ = random_setup(1)
    x = rng.normal(size=(5, SD))
    xi = rng.normal(size=(5, 1)) * 0.5
    u, lp, _ = policy_forward(pol, x, xi)
    np.testing.assert_allclose(log_prob(pol, x, u), lp, rtol=1e-7)


@settings(max_examples=40, deadline=None)
@given(mean=st.floats(-50, 50), raw=st.floats(-100, 100), xi=st.floats(-6, 6))
def test_actions_within_bounds_and_log_std_clamped(mean, raw, xi):
    pol = const_policy(mean, raw, 3.0)
    u, lp, cache = policy_forward(pol, np.zeros((1, SD)), np.array([[xi]]))
    assert np.all(np.abs(u) <= 3.0)
    assert np.all(np.isfinite(lp))
    assert -20.0 <= np.log(cache.std[0, 0]) <= 2.0 + 1e-12


def test_policy_backward_matches_fd():
    rng, pol, _ = random_setup(2)
    x = rng.normal(size=(4, SD))
    xi = rng.normal(size=(4, 1))
    wu, wl = rng.normal(size=(4, 1)), rng.normal(size=4)

    def f(p):
        u, lp, _ = policy_forward(p, x, xi)
        return float(np.sum(wu * u) + np.sum(wl * lp))

    _, _, cache = policy_forward(pol, x, xi)
    grad, _ = policy_backward(pol, cache, wu, wl)
    assert rel(grad.flat(), fd_policy(pol, f)) < 1e-5


# ------------------------------------------------------------------ critics

def test_q_loss_gamma_zero_reduces_to_regression():
    rng, pol, crit = random_setup(3)
    b = make_batch(rng)
    loss, _, _ = q_loss(crit, pol, 0.7, b, 0.0, rng.normal(size=(len(b), 1)))
    want = np.mean((b.r - crit.q1(b.x, b.u)) ** 2) + np.mean((b.r - crit.q2(b.x, b.u)) ** 2)
    assert loss == pytest.approx(want, rel=1e-12)


def test_q_loss_zero_at_fixed_point():
    gamma, c = 0.9, 2.0
    crit = critics_with(const_q(c), const_q(c))
    rng = np.random.default_rng(4)
    b = make_batch(rng)
    b.r[:] = c * (1 - gamma)
    loss, grads, _ = q_loss(crit, const_policy(0.0, 0.0), 0.0, b, gamma, rng.normal(size=(len(b), 1)))
    assert loss == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(grads[0].flat(), 0.0)


def test_q_loss_two_sample_scripted():
    rng, pol, crit = random_setup(5)
    b = make_batch(rng, n=2)
    xi = rng.normal(size=(2, 1))
    alpha, gamma = 0.3, 0.95
    total = 0.0
    for q in (crit.q1, crit.q2):
        s = 0.0
        for j in range(2):
            out = mlp_forward(pol.net, pol.norm(b.x_next[j]))
            std = np.exp(np.clip(out[1], -20, 2))
            pre = out[0] + std * xi[j, 0]
            un = 2.0 * np.tanh(pre)
            lp = (-0.5 * xi[j, 0] ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi)
                  - np.log(1 - np.tanh(pre) ** 2) - np.log(2.0))
            zn = np.concatenate([b.x_next[j], [un]])
            qt = min(mlp_forward(crit.q1_targ.net, crit.q1_targ.norm(zn))[0],
                     mlp_forward(crit.q2_targ.net, crit.q2_targ.norm(zn))[0])
            y = b.r[j] + gamma * (qt - alpha * lp)
            pred = mlp_forward(q.net, q.norm(np.concatenate([b.x[j], b.u[j]])))[0]
            s += (pred - y) ** 2
        total += s / 2
    loss, _, _ = q_loss(crit, pol, alpha, b, gamma, xi)
    assert loss == pytest.approx(total, rel=1e-10)


def test_q_loss_gradient_matches_fd():
    rng, pol, crit = random_setup(6)
    b = make_batch(rng)
    xi = rng.normal(size=(len(b), 1))
    _, (g1, _), _ = q_loss(crit, pol, 0.2, b, 0.9, xi)
    base = crit.q1.net.flat()
    eps = 1e-6
    fd = np.empty_like(base)
    for i in range(base.size):
        vals = []
        for d in (eps, -eps):
            v = base.copy()
            v[i] += d
            c2 = CriticSet(QNet(crit.q1.net.with_flat(v), crit.q1.norm), crit.q2, crit.q1_targ,
                           crit.q2_targ, crit.lyapunov, crit.lyapunov_targ)
            vals.append(q_loss(c2, pol, 0.2, b, 0.9, xi)[0])
        fd[i] = (vals[0] - vals[1]) / (2 * eps)
    assert rel(g1.flat(), fd) < 1e-6


def test_lyapunov_loss_examples():
    rng = np.random.default_rng(7)
    b = make_batch(rng, n=1)
    b.c[:] = 1.0
    crit = critics_with(const_q(0), const_q(0), const_lyap(2.0))
    loss, _ = lyapunov_loss(crit, b, 0.5)
    assert loss == pytest.approx(0.0, abs=1e-20)
    b = make_batch(rng, n=4)
    b.c[:] = 1.5
    crit = critics_with(const_q(0), const_q(0), const_lyap(1.5))
    assert lyapunov_loss(crit, b, 0.0)[0] == pytest.approx(0.0, abs=1e-20)


def test_lyapunov_loss_gradient_matches_fd():
    rng, _, crit = random_setup(8)
    b = make_batch(rng)
    _, g = lyapunov_loss(crit, b, 0.9, 0.5)
    base = crit.lyapunov.net.flat()
    eps = 1e-6
    fd = np.empty_like(base)
    for i in range(base.size):
        vals = []
        for d in (eps, -eps):
            v = base.copy()
            v[i] += d
            crit.lyapunov = LyapunovNet(crit.lyapunov.net.with_flat(v), crit.lyapunov.norm)
            vals.append(lyapunov_loss(crit, b, 0.9, 0.5)[0])
        fd[i] = (vals[0] - vals[1]) / (2 * eps)
    crit.lyapunov = LyapunovNet(crit.lyapunov.net.with_flat(base), crit.lyapunov.norm)
    assert rel(g.flat(), fd) < 1e-6


def test_lyapunov_net_non_negative():
    rng, _, crit = random_setup(9)
    assert np.all(crit.lyapunov(rng.normal(size=(100, SD)) * 50) >= 0)


# ------------------------------------------------------------------ entropy coefficient

def test_alpha_fixed_point():
    _, g = alpha_loss(0.3, np.array([0.5, 1.5]), -1.0)
    assert g == 0.0


def test_alpha_grows_when_entropy_too_low():
    # E[log pi] = 2 > -H = 1: entropy below target, descent must raise log alpha
    _, g = alpha_loss(0.0, np.array([2.0, 2.0]), -1.0)
    assert g < 0


def test_alpha_two_sample_scripted():
    val, g = alpha_loss(np.log(0.5), np.array([-0.2, 0.6]), -1.0)
    want = -0.5 * ((-0.2 - 1.0) + (0.6 - 1.0)) / 2
    assert val == pytest.approx(want) and g == pytest.approx(want)


# ------------------------------------------------------------------ policy objective

def test_flat_landscape_zero_gradient():
    crit = critics_with(const_q(1.0), const_q(1.0))
    rng, pol, _ = random_setup(10)
    x = rng.normal(size=(5, SD))
    _, grad = policy_objective(pol, crit, 0.0, x, rng.normal(size=(5, 1)))
    assert np.allclose(grad.flat(), 0.0)


def bump_q():
    """Q(u) = tanh(u + 1) - tanh(u - 1): even in u with its maximum at u = 0."""
    w1 = np.zeros((2, SD + 1))
    w1[:, SD] = 1.0
    net = MlpParams([SD + 1, 2, 1], [w1, np.array([[1.0, -1.0]])], [np.array([1.0, -1.0]), np.zeros(1)])
    return QNet(net, Normalizer.identity(SD + 1))


@pytest.mark.parametrize("mean", [0.8, -0.8])
def test_gradient_pushes_mean_toward_peak(mean):
    crit = critics_with(bump_q(), bump_q())
    pol = const_policy(mean, -6.0, 1.0)
    x = np.zeros((4, SD))
    _, grad = policy_objective(pol, crit, 0.0, x, np.random.default_rng(0).normal(size=(4, 1)))
    # descent step on the mean bias moves it toward zero
    assert np.sign(grad.biases[0][0]) == np.sign(mean)


def test_policy_objective_matches_fd():
    rng, pol, crit = random_setup(11)
    x = rng.normal(size=(5, SD))
    xi = rng.normal(size=(5, 1))
    _, grad = policy_objective(pol, crit, 0.4, x, xi)
    fd = fd_policy(pol, lambda p: policy_objective(p, crit, 0.4, x, xi)[0])
    assert rel(grad.flat(), fd) < 1e-5


# ------------------------------------------------------------------ targets, replay, layers

def test_target_update_cases():
    a = const_q(4.0)
    t = const_q(2.0)
    target_update(a, t, 0.5)
    assert t.net.biases[0][0] == 3.0
    target_update(a, t, 0.0)
    assert t.net.biases[0][0] == 3.0
    target_update(a, t, 1.0)
    assert t.net.biases[0][0] == 4.0
    assert t.net.biases[0] is not a.net.biases[0]


def _tr(i):
    return Transition(0.0, np.full(SD, i, float), np.array([0.0]), float(i), 0.0, np.zeros(SD))


def test_replay_uniform():
    buf = ReplayBuffer(100, SD, 1, np.random.default_rng(12))
    for i in range(100):
        buf.add(_tr(i))
    counts = np.bincount(buf.sample_indices(100_000), minlength=100)
    assert np.all(np.abs(counts - 1000) <= 150)


def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(5, SD, 1, np.random.default_rng(0))
    for i in range(8):
        buf.add(_tr(i))
    assert len(buf) == 5
    assert sorted(buf.r.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]
    with pytest.raises(ValueError):
        ReplayBuffer(3, SD, 1).sample(1)


def test_layers_round_trip():
    rng, pol, crit = random_setup(13)
    pol2 = policy_from_layers("p", policy_to_layers("p", pol))
    crit2 = critics_from_layers(critics_to_layers(crit))
    x = rng.normal(size=(3, SD))
    xi = rng.normal(size=(3, 1))
    np.testing.assert_array_equal(policy_forward(pol2, x, xi)[0], policy_forward(pol, x, xi)[0])
    u = rng.normal(size=(3, 1))
    np.testing.assert_array_equal(crit2.q2_targ(x, u), crit.q2_targ(x, u))
    np.testing.assert_array_equal(crit2.lyapunov(x), crit.lyapunov(x))
