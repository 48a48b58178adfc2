import numpy as np
import pytest
import scipy.sparse as sp

from stabdyn.conic import (
    INFEASIBLE,
    OPTIMAL,
    ConicProblem,
    LMIBatch,
    dump,
    residuals,
    smat,
    solve,
    svec,
)
from stabdyn.errors import ParameterError

# objective of the random SDP-QP below, frozen from two independent external
# solvers (Clarabel and SCS, agreeing to 2e-11)
RANDOM_SDP_QP_OPTIMUM = -1.17684466235


def power_iteration_lmax(A, iters=5000):
    shift = np.abs(A).sum()  # A + shift I is positive definite, top eigenvalue dominant
    v = np.ones(len(A)) / np.sqrt(len(A))
    for _ in range(iters):
        w = (A + shift * np.eye(len(A))) @ v
        v = w / np.linalg.norm(w)
    return float(v @ A @ v)


def random_sdp_qp():
    rng = np.random.default_rng(2024)
    n = 8
    Qh = rng.standard_normal((n, n))
    Q = Qh @ Qh.T
    c = rng.standard_normal(n)
    F0 = -np.eye(4) * 3 + 0.1 * rng.standard_normal((4, 4))
    F0 = (F0 + F0.T) / 2
    Fi = rng.standard_normal((n, 4, 4))
    Fi = (Fi + np.swapaxes(Fi, 1, 2)) / 2
    G = rng.standard_normal((5, n))
    h = rng.random(5)
    return ConicProblem(Q, c, G=G, h=h, lmis=[LMIBatch.from_matrices(F0, Fi)])


def test_svec_round_trip(rng):
    A = rng.standard_normal((5, 5))
    A = A + A.T
    B = rng.standard_normal((5, 5))
    B = B + B.T
    np.testing.assert_allclose(smat(svec(A)), A, atol=1e-15)
    assert svec(A) @ svec(B) == pytest.approx(np.trace(A @ B))


def test_min_eigenvalue_bound(rng):
    M = rng.standard_normal((3, 3))
    A = M + M.T
    # min t  s.t.  A - t I <= 0
    p = ConicProblem(np.zeros((1, 1)), np.array([1.0]), lmis=[LMIBatch.from_matrices(A, [-np.eye(3)])])
    sol = solve(p)
    assert sol.status == OPTIMAL
    assert abs(sol.x[0] - power_iteration_lmax(A)) < 1e-6


def test_projection_onto_halfline():
    p = ConicProblem(2 * np.eye(1), np.zeros(1), G=-np.eye(1), h=-np.ones(1))
    sol = solve(p)
    assert sol.status == OPTIMAL and abs(sol.x[0] - 1) < 1e-6


def test_unconstrained_quadratic():
    target = np.array([0.5, -2.0, 3.0])
    sol = solve(ConicProblem(2 * np.eye(3), -2 * target))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, target, atol=1e-6)


def test_two_by_two_sdp():
    # min x1 + x2  s.t.  [[x1, 1], [1, x2]] >= 0  ->  x = (1, 1)
    F0 = -np.array([[0.0, 1.0], [1.0, 0.0]])
    Fi = -np.array([[[1.0, 0], [0, 0]], [[0, 0], [0, 1.0]]])
    sol = solve(ConicProblem(np.zeros((2, 2)), np.ones(2), lmis=[LMIBatch.from_matrices(F0, Fi)]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-6)


def test_equality_constrained_qp():
    n = 5
    sol = solve(ConicProblem(np.eye(n), np.zeros(n), A=np.ones((1, n)), b=np.ones(1)))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, np.full(n, 1 / n), atol=1e-6)


def test_random_sdp_qp_against_frozen_optimum():
    sol = solve(random_sdp_qp())
    assert sol.status == OPTIMAL
    assert abs(sol.objective - RANDOM_SDP_QP_OPTIMUM) < 1e-6


def test_infeasible_is_reported():
    p = ConicProblem(2 * np.eye(1), np.zeros(1), G=np.array([[-1.0], [1.0]]), h=np.array([-1.0, 0.0]))
    assert solve(p).status == INFEASIBLE


def test_reported_residuals_are_honest():
    p = random_sdp_qp()
    sol = solve(p)
    eq, lmi, lin = residuals(p, sol.x)
    assert eq <= sol.eq_residual + 1e-15
    assert lmi <= sol.lmi_residual + 1e-15
    assert lin <= sol.ineq_residual + 1e-15
    assert max(sol.eq_residual, sol.lmi_residual, sol.ineq_residual) <= 1e-7


def test_deterministic():
    a, b = solve(random_sdp_qp()), solve(random_sdp_qp())
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations


def _structured_problem(rng, sparse_g=False):
    """Batch mixing dense, row-block and private terms, plus its dense twin."""
    nb, d = 6, 3
    sv = d * (d + 1) // 2
    w = 2
    nd = 3
    nx = nd + sv * w + nb
    coef = 0.3 * rng.standard_normal((nb, sv, nd))
    rowfeat = 0.3 * rng.standard_normal((nb, sv, w))
    row_cols = nd + np.arange(sv * w).reshape(sv, w)
    private = nd + sv * w + np.arange(nb)
    private_coef = np.tile(-svec(np.eye(d)), (nb, 1))  # slack s_j enters as -s_j I
    F0 = np.stack([-np.eye(d) + 0.5 * np.diag(rng.standard_normal(d)) for _ in range(nb)])
    batch = LMIBatch(F0, coef, np.arange(nd), rowfeat, row_cols, private, private_coef)
    full = np.zeros((nb, sv, nx))
    full[:, :, :nd] = coef
    for r in range(sv):
        full[:, r, row_cols[r]] = rowfeat[:, r, :]
    full[np.arange(nb), :, private] = private_coef
    twin = LMIBatch(F0, full)
    Q = np.eye(nx)
    c = rng.standard_normal(nx)
    c[private] = 5.0
    G = -np.eye(nx)[private]
    G = sp.csr_matrix(G) if sparse_g else G
    h = np.zeros(nb)
    return ConicProblem(Q, c, G=G, h=h, lmis=[batch]), ConicProblem(Q, c, G=G, h=h, lmis=[twin])


def test_structured_batch_matches_dense_twin(rng):
    p, twin = _structured_problem(rng, sparse_g=True)
    x = rng.standard_normal(p.nx)
    np.testing.assert_allclose(p.lmis[0].values(x), twin.lmis[0].values(x), atol=1e-13)
    v = rng.standard_normal((p.lmis[0].nb, p.lmis[0].sv))
    np.testing.assert_allclose(p.lmis[0].apply_T(v, p.nx), twin.lmis[0].apply_T(v, p.nx), atol=1e-12)
    T = rng.standard_normal((p.lmis[0].nb, p.lmis[0].sv, p.lmis[0].sv))
    H1, H2 = np.zeros((p.nx, p.nx)), np.zeros((p.nx, p.nx))
    p.lmis[0].add_schur(H1, T)
    twin.lmis[0].add_schur(H2, T)
    np.testing.assert_allclose(H1, H2, atol=1e-11)
    a, b = solve(p), solve(twin)
    assert a.status == b.status == OPTIMAL
    assert a.objective == pytest.approx(b.objective, abs=1e-6)


def test_validation_errors():
    with pytest.raises(ParameterError):
        solve(ConicProblem(np.eye(2), np.zeros(3)))
    bad = LMIBatch(np.zeros((1, 2, 2)), np.zeros((1, 3, 5)))
    with pytest.raises(ParameterError):
        solve(ConicProblem(np.eye(2), np.zeros(2), lmis=[bad]))
    dup = LMIBatch(np.zeros((1, 2, 2)), rowfeat=np.zeros((1, 3, 1)), row_cols=np.zeros((3, 1), dtype=int))
    with pytest.raises(ParameterError):
        solve(ConicProblem(np.eye(2), np.zeros(2), lmis=[dup]))


def test_dump_is_readable(tmp_path):
    p = random_sdp_qp()
    path = tmp_path / "p.txt"
    dump(p, path)
    text = path.read_text().splitlines()
    heads = [ln for ln in text if ln.startswith("#")]
    assert heads[0] == "# Q 8 8"
    assert any(h.startswith("# lmi0.svec_coef[0] 10 8") for h in heads)
