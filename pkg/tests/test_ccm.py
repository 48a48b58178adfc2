import numpy as np
import pytest

from conftest import random_model
from stabdyn.ccm import assemble_F, stability_blocks, violation, worst_violation
from stabdyn.errors import NumericError, ParameterError
from stabdyn.learner import TrainConfig
from stabdyn.model import DynamicsParams, MetricParams, build_model

CFG = TrainConfig()


def jacobi_eigenvalues(A, sweeps=50):
    """Cyclic Jacobi rotations; independent of LAPACK."""
    A = np.array(A, dtype=float)
    n = len(A)
    for _ in range(sweeps):
        off = np.sqrt(np.sum((A - np.diag(np.diag(A))) ** 2))
        if off < 1e-15:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(tau) / (abs(tau) + np.sqrt(1 + tau**2)) if tau != 0 else 1.0
                c = 1 / np.sqrt(1 + t**2)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q], R[q, p] = s, -s
                A = R.T @ A @ R
    return np.sort(np.diag(A))


def small_model(seed=3):
    rng = np.random.default_rng(seed)
    m = build_model(3, 1, s_f=5, sigma_f=2.0, s_w=4, sigma_w=3.0, seed=seed)
    m = m.with_dynamics(DynamicsParams(rng.standard_normal(m.f_map.d), rng.standard_normal((1, m.b_map.d))))
    return m.with_metric(MetricParams(2.0, 0.3 * rng.standard_normal(m.metric.theta.shape)))


def brute_force_F(model, x, rate, h=1e-6):
    n, k = model.n, model.n - model.m
    f = model.f(x)
    J = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (model.f(x + e) - model.f(x - e)) / (2 * h)
    dW = (model.W(x + h * f) - model.W(x - h * f)) / (2 * h)
    W = model.W(x)
    inner = -dW + J @ W + W @ J.T + 2 * rate * W
    return inner[:k, :k]


def test_identity_metric_zero_dynamics():
    m = build_model(6, 2)
    F = assemble_F(m, np.ones(6), 0.1).F
    np.testing.assert_allclose(F, 0.2 * np.eye(4), atol=1e-15)
    assert not np.any(assemble_F(m, np.ones(6), 0.0).F)
    v = violation(m, np.zeros(6), CFG)
    assert v.stability_part == pytest.approx(0.4)
    assert v.definiteness_part == pytest.approx(-0.8)
    assert v.nu == pytest.approx(0.4)


def test_definiteness_part_for_small_metric():
    m = build_model(6, 2)
    m = m.with_metric(MetricParams(0.15, m.metric.theta))
    assert violation(m, np.zeros(6), CFG).definiteness_part == pytest.approx(0.05)


def test_against_brute_force_assembly(rng):
    m = small_model()
    for _ in range(10):
        x = rng.uniform(-2, 2, 3)
        np.testing.assert_allclose(assemble_F(m, x, 0.3).F, brute_force_F(m, x, 0.3), atol=1e-5)


def test_violation_against_jacobi_oracle(rng):
    m = random_model()
    X = rng.uniform(-10, 10, (50, 6))
    F = stability_blocks(m, X, CFG.lam + CFG.eps_lambda)
    W = m.W(X)
    for i, x in enumerate(X):
        stab = jacobi_eigenvalues(F[i])[-1]
        defin = jacobi_eigenvalues(0.2 * np.eye(6) - W[i])[-1]
        v = violation(m, x, CFG)
        assert abs(v.stability_part - stab) < 1e-8
        assert abs(v.definiteness_part - defin) < 1e-8
        assert v.nu == max(v.stability_part, v.definiteness_part)


def test_worst_violation_matches_scan(rng):
    m = random_model()
    X = rng.uniform(-10, 10, (200, 6))
    s_bar, nu = worst_violation(m, X, CFG)
    scan = [violation(m, x, CFG) for x in X]
    assert s_bar == pytest.approx(max(v.stability_part for v in scan), abs=1e-12)
    np.testing.assert_allclose(nu, [v.nu for v in scan], atol=1e-12)
    s1, _ = worst_violation(build_model(6, 2), X[:1], CFG)
    assert s1 == pytest.approx(2 * (CFG.lam + CFG.eps_lambda))


def test_rate_shift_identity(rng):
    m = random_model()
    for x in rng.uniform(-10, 10, (20, 6)):
        diff = assemble_F(m, x, 0.7).F - assemble_F(m, x, 0.2).F
        np.testing.assert_allclose(diff, 2 * 0.5 * m.W(x)[:4, :4], atol=1e-10)


def test_bilinearity(rng):
    m = random_model()
    x = rng.uniform(-5, 5, 6)
    zero = m.with_dynamics(DynamicsParams(0 * m.dynamics.alpha, m.dynamics.betas))
    two = m.with_dynamics(DynamicsParams(2 * m.dynamics.alpha, m.dynamics.betas))
    base = assemble_F(zero, x, 0.2).F
    np.testing.assert_allclose(assemble_F(two, x, 0.2).F - base, 2 * (assemble_F(m, x, 0.2).F - base), atol=1e-10)
    met2 = m.with_metric(MetricParams(2 * m.metric.offset, 2 * m.metric.theta))
    np.testing.assert_allclose(assemble_F(met2, x, 0.2).F, 2 * assemble_F(m, x, 0.2).F, atol=1e-10)


def test_symmetry(rng):
    F = stability_blocks(random_model(), rng.uniform(-5, 5, (30, 6)), 0.2)
    assert np.array_equal(F, np.swapaxes(F, -1, -2))


def test_errors():
    m = build_model(6, 2)
    with pytest.raises(ParameterError):
        worst_violation(m, np.zeros((0, 6)), CFG)
    with pytest.raises(ParameterError):
        assemble_F(m, np.zeros(4), 0.1)
    with pytest.raises(NumericError):
        violation(m, np.full(6, np.nan), CFG)
