"""Small deterministic training instances shared by tests and their offline oracles."""

import numpy as np

from stabdyn.learner import TrainConfig
from stabdyn.model import DynamicsParams, MetricParams, build_model
from stabdyn.pvtol import Dataset


def small_model(seed=5):
    rng = np.random.default_rng(seed)
    m = build_model(3, 1, s_f=2, sigma_f=2.0, s_w=2, sigma_w=3.0, seed=seed)
    m = m.with_dynamics(DynamicsParams(0.3 * rng.standard_normal(m.f_map.d), rng.standard_normal((1, m.b_map.d))))
    return m.with_metric(MetricParams(1.5, 0.05 * rng.standard_normal(m.metric.theta.shape), 1.0, 2.0))


def small_data(seed=6, N=5):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (N, 3))
    U = rng.uniform(-1, 1, (N, 1))
    Xdot = -X + np.hstack([np.zeros((N, 2)), U]) + 0.05 * rng.standard_normal((N, 3))
    return Dataset(X, U, Xdot)


def small_points(seed=7, n=3):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3))


SMALL_CFG = TrainConfig(mu_f=1e-2, mu_b=1e-3, mu_w=1e-2, mu_s=0.1)
DYN_CAP = 0.3
MET_CAP = 0.3
