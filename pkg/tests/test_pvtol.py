import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference
from stabdyn.errors import NumericError, ParameterError
from stabdyn.pvtol import (
    ConstraintSet,
    DemoScenario,
    PvtolParams,
    StateBox,
    generate_demonstrations,
    pvtol_B,
    pvtol_derivative,
    pvtol_f,
    pvtol_jac_f,
    read_constraints_csv,
    read_dataset_csv,
    rk4_step,
    sample_constraint_points,
    write_constraints_csv,
    write_dataset_csv,
)

P = PvtolParams()


def written_out(p, x, u):
    """The planar quadrotor equations written component by component."""
    px, pz, phi, vx, vz, w = x
    u1, u2 = u
    return np.array(
        [
            vx * np.cos(phi) - vz * np.sin(phi),
            vx * np.sin(phi) + vz * np.cos(phi),
            w,
            vz * w - p.g * np.sin(phi),
            -vx * w - p.g * np.cos(phi) + (u1 + u2) / p.m,
            (u1 - u2) * p.l / p.J,
        ]
    )


@pytest.fixture(scope="module")
def demo():
    return generate_demonstrations(P, 0, 100)


def test_parameters_must_be_positive():
    with pytest.raises(ParameterError):
        PvtolParams(m=0.0)


def test_hover_is_an_equilibrium():
    x = np.array([3.0, -2.0, 0, 0, 0, 0])
    assert np.abs(pvtol_derivative(P, x, P.hover_input)).max() < 1e-15


def test_gravity_projection():
    xd = pvtol_derivative(P, np.array([0, 0, np.pi / 2, 0, 0, 0]), np.zeros(2))
    assert xd[3] == pytest.approx(-P.g)
    assert xd[4] == pytest.approx(0.0, abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 2, elements=st.floats(0, 10)))
def test_matches_written_out_equations(x, u):
    np.testing.assert_allclose(pvtol_derivative(P, x, u), written_out(P, x, u), rtol=1e-13, atol=1e-12)
    assert pvtol_f(P, x)[5] == 0.0


def test_input_matrix_structure():
    B = pvtol_B(P)
    assert not np.any(B[:4])
    assert np.array_equal(B, pvtol_B(P))


def test_jacobian_finite_difference(rng):
    for _ in range(20):
        x = rng.uniform(-3, 3, 6)
        np.testing.assert_allclose(pvtol_jac_f(P, x), central_difference(lambda y: pvtol_f(P, y), x), atol=1e-8)


def test_rk4_zero_field():
    x = np.array([1.0, 2.0])
    assert np.array_equal(rk4_step(lambda x, u: np.zeros_like(x), x, None, 0.1), x)


def test_rk4_exponential():
    # Taylor oracle: 1 + h + h^2/2 + h^3/6 + h^4/24 at h = 0.1
    out = rk4_step(lambda x, u: x, np.array([1.0]), None, 0.1)[0]
    assert out == pytest.approx(1.1051708333333333, abs=1e-15)
    assert abs(out - np.exp(0.1)) < 0.1**5


def test_rk4_hover_drift():
    x = np.array([1.0, 1.0, 0, 0, 0, 0])
    x0 = x.copy()
    for _ in range(100):
        x = rk4_step(lambda y, u: pvtol_derivative(P, y, u), x, P.hover_input, 0.01)
    assert np.abs(x - x0).max() < 1e-9


def test_rk4_errors():
    with pytest.raises(ParameterError):
        rk4_step(lambda x, u: x, np.ones(1), None, 0.0)
    with pytest.raises(NumericError):
        rk4_step(lambda x, u: np.full_like(x, np.inf), np.ones(1), None, 0.1)


def test_demonstrations(demo):
    ds, trajs = demo
    assert len(ds) == 100
    assert np.array_equal(ds.Xdot, pvtol_derivative(P, ds.X, ds.U))
    assert np.all(ds.U > 0) and np.all(np.isfinite(ds.X))
    assert np.all(StateBox().contains(ds.X))
    assert len(trajs) >= DemoScenario().n_rollouts


def test_demonstrations_are_deterministic(demo):
    again, _ = generate_demonstrations(P, 0, 100)
    assert np.array_equal(again.X, demo[0].X) and np.array_equal(again.U, demo[0].U)
    other, _ = generate_demonstrations(P, 1, 100)
    assert not np.array_equal(other.X, demo[0].X)


def test_demonstrations_reject_bad_arguments():
    with pytest.raises(ParameterError):
        generate_demonstrations(P, 0, 0)
    with pytest.raises(ParameterError):
        generate_demonstrations(P, 0, 10, dt_sample=0.001)


def test_constraint_points(demo):
    ds = demo[0]
    cs = sample_constraint_points(ds, 500, seed=0)
    assert len(cs) == 600
    assert np.array_equal(cs.points[:100], ds.X)
    assert cs.tags.count("demo") == 100 and cs.tags.count("random") == 500
    assert np.all(StateBox().contains(cs.points))
    only = sample_constraint_points(ds, 0)
    assert np.array_equal(only.points, ds.X)
    big = sample_constraint_points(ds, 2426 - 100)
    assert len(big) == 2426
    with pytest.raises(ParameterError):
        sample_constraint_points(ds, 5, StateBox((0.0,) * 6, (0.0,) * 6))
    with pytest.raises(ParameterError):
        sample_constraint_points(ds, -1)


def test_csv_round_trip(demo, tmp_path):
    ds = demo[0]
    write_dataset_csv(tmp_path / "d.csv", ds, ["seed 0", ""])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "# seed 0" and lines[1] == "#"
    assert lines[2].split(",") == ["x1", "x2", "x3", "x4", "x5", "x6", "u1", "u2"] + [f"xdot{i}" for i in range(1, 7)]
    assert len(lines) == 3 + 100
    back = read_dataset_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.U, ds.U) and np.array_equal(back.Xdot, ds.Xdot)
    cs = ConstraintSet(ds.X[:3], ("demo", "demo", "random"))
    write_constraints_csv(tmp_path / "c.csv", cs)
    cb = read_constraints_csv(tmp_path / "c.csv")
    assert np.array_equal(cb.points, cs.points) and cb.tags == cs.tags


def test_csv_rejects_garbage(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ParameterError):
        read_dataset_csv(p)
    with pytest.raises(ParameterError):
        read_constraints_csv(p)
    p.write_text("x1,x2,x3,x4,x5,x6,tag\n1,2,3\n")
    with pytest.raises(ParameterError):
        read_constraints_csv(p)
