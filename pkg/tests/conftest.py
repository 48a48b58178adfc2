import numpy as np
import pytest

from stabdyn.model import DynamicsParams, MetricParams, build_model


def central_difference(fun, x, h=1e-5):
    """Columns d fun / d x_j by central differences; fun returns an array."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def random_model(seed=1, scale=0.1, offset=1.3):
    rng = np.random.default_rng(seed)
    m = build_model(6, 2)
    m = m.with_dynamics(DynamicsParams(rng.standard_normal(m.f_map.d), rng.standard_normal((2, m.b_map.d))))
    return m.with_metric(MetricParams(offset, scale * rng.standard_normal(m.metric.theta.shape), 0.5, 3.0))


@pytest.fixture(scope="session")
def rand_model():
    return random_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one pass/fail line per acceptance criterion, printed again at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
