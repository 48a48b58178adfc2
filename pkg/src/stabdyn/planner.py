"""Trajectory generation and tracking evaluation.

Dynamics objects used here expose f(x), B(x) (state independent),
jac_f(x) and the attributes n, m; both LearnedModel and PvtolDynamics
qualify.

Feedback convention: u(t) = u*(t) + K(t) (x*(t) - x(t)).
"""

from __future__ import annotations

import logging
import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp
from scipy.optimize import minimize

from .errors import NumericError, ParameterError
from .pvtol import StateBox, rk4_step

log = logging.getLogger(__name__)


# Chebyshev-Gauss-Lobatto machinery ------------------------------------------


def cheb_nodes(K: int) -> np.ndarray:
    """CGL points on [-1, 1] in decreasing order, cos(pi j / (K - 1))."""
    return np.cos(np.pi * np.arange(K) / (K - 1))


def cheb_diff_matrix(K: int) -> np.ndarray:
    """Spectral differentiation matrix on cheb_nodes(K)."""
    N = K - 1
    x = cheb_nodes(K)
    c = np.ones(K)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(K)
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(K))
    D -= np.diag(D.sum(axis=1))
    if N == 0:
        return np.zeros((1, 1))
    return D


def clenshaw_curtis_weights(K: int) -> np.ndarray:
    """Quadrature weights on cheb_nodes(K) for the interval [-1, 1]."""
    N = K - 1
    theta = np.pi * np.arange(K) / N
    w = np.zeros(K)
    v = np.ones(N - 1)
    interior = theta[1:-1]
    if N % 2 == 0:
        w[0] = w[-1] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * interior) / (4 * k * k - 1)
        v -= np.cos(N * interior) / (N**2 - 1)
    else:
        w[0] = w[-1] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * interior) / (4 * k * k - 1)
    w[1:-1] = 2.0 * v / N
    return w


def barycentric_weights(K: int) -> np.ndarray:
    w = (-1.0) ** np.arange(K)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def barycentric_interpolate(nodes: np.ndarray, weights: np.ndarray, values: np.ndarray, t) -> np.ndarray:
    """Evaluate the interpolant through (nodes, values) at t (scalar or array)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    diff = t[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-14, rtol=0.0)
    diff[exact] = 1.0
    q = weights / diff
    out = (q @ values.reshape(len(nodes), -1)) / q.sum(axis=1, keepdims=True)
    hit_rows, hit_cols = np.nonzero(exact)
    out[hit_rows] = values.reshape(len(nodes), -1)[hit_cols]
    return out.reshape((len(t),) + values.shape[1:])


# trajectories ---------------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    t: np.ndarray  # (K,) increasing CGL times on [0, T]
    X: np.ndarray  # (K, n)
    U: np.ndarray  # (K, m)
    T: float
    cost: float
    residual: float  # max collocation defect at the nodes
    boundary_residual: float
    success: bool
    message: str = ""

    @property
    def _bw(self) -> np.ndarray:
        return barycentric_weights(len(self.t))

    def state(self, t) -> np.ndarray:
        t = np.clip(t, 0.0, self.T)
        out = barycentric_interpolate(self.t, self._bw, self.X, t)
        return out[0] if np.ndim(t) == 0 else out

    def input(self, t) -> np.ndarray:
        t = np.clip(t, 0.0, self.T)
        out = barycentric_interpolate(self.t, self._bw, self.U, t)
        return out[0] if np.ndim(t) == 0 else out


def _equilibrium_input(dyn, x) -> np.ndarray:
    B = np.asarray(dyn.B(x))
    return np.linalg.lstsq(B, -np.asarray(dyn.f(x)), rcond=None)[0]


def _no_limit(v, dv) -> float:
    return 1.0


def _restore_feasibility(cons, jac, v, step_limit=_no_limit, iters: int = 50):
    """Damped minimum-norm Gauss-Newton steps on |c|^2."""
    for _ in range(iters):
        c = cons(v)
        if not np.all(np.isfinite(c)) or np.abs(c).max() < 1e-10:
            break
        dv = np.linalg.lstsq(jac(v), -c, rcond=None)[0]
        a, f0 = step_limit(v, dv), c @ c
        while a > 1e-6:
            ct = cons(v + a * dv)
            if np.all(np.isfinite(ct)) and ct @ ct <= (1 - 1e-4 * a) * f0:
                break
            a *= 0.5
        else:
            break
        v = v + a * dv
    return v


def _sqp(objective, cons, jac, hessians, v, max_iters: int, tol: float, step_limit=_no_limit):
    """Equality-constrained SQP with an l1 merit line search.

    objective(v) returns (value, gradient); hessians(v, lam) lists candidate
    Hessians, the Lagrangian one first.  A proximal term tau*I is added; tau
    grows when the line search has to cut the step and shrinks after full
    steps, which keeps steps where the linearization can be trusted.  The
    next candidate is tried when a step is not a descent direction.
    step_limit(v, dv) caps the step length (fraction to the boundary of a
    barrier domain).  Returns (v, iterations, message).
    """
    v = _restore_feasibility(cons, jac, v, step_limit)
    nv = len(v)
    lam = None
    rho, tau = 1.0, 1e-6
    eye = np.eye(nv)
    for it in range(1, max_iters + 1):
        c, J = cons(v), jac(v)
        f0, g = objective(v)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(J)) and np.isfinite(f0)):
            return v, it, "non-finite values"
        nc = len(c)
        for H in hessians(v, lam):
            H = H + tau * eye
            KKT = np.zeros((nv + nc, nv + nc))
            KKT[:nv, :nv] = H
            KKT[:nv, nv:] = J.T
            KKT[nv:, :nv] = J
            rhs = -np.concatenate([g, c])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
            dv, lam_new = sol[:nv], sol[nv:]
            if np.all(np.isfinite(sol)) and dv @ H @ dv > 0:
                break
        stat = np.abs(g + J.T @ lam_new).max()
        if np.abs(c).max() <= 1e-2 * tol and stat <= tol * (1.0 + np.abs(g).max()):
            return v, it, "converged"
        rho = max(rho, 2.0 * np.abs(lam_new).max())
        cabs = np.abs(c).sum()
        phi0 = f0 + rho * cabs
        slope = g @ dv - rho * cabs
        a = a_max = step_limit(v, dv)
        while a > 1e-10:
            trial = v + a * dv
            phi = objective(trial)[0] + rho * np.abs(cons(trial)).sum()
            if np.isfinite(phi) and phi <= phi0 + 1e-4 * a * min(slope, 0.0):
                break
            a *= 0.5
        else:
            return v, it, "line search failed"
        tau = max(tau * 0.3, 1e-8) if a == a_max else min(tau * 10.0 * a_max / a, 1e8)
        v, lam = trial, lam_new
    return v, max_iters, "iteration limit reached"


def trajopt_chebyshev(
    dyn, x0, xgoal, T: float, R=None, K: int = 40, max_iters: int = 500, tol: float = 1e-6, box=None, barrier: float = 1e-4
) -> Trajectory:
    """Minimum-effort fixed-time transfer by CGL collocation.

    Minimizes sum_k w_k u_k' R u_k (Clenshaw-Curtis weights) subject to
    D X = F(X, U) at all nodes and pinned end states.  box = (lower, upper)
    keeps the interior nodes strictly inside a state box through a log
    barrier of weight `barrier`.  A Newton SQP solves the program; a
    Gauss-Newton pass then drives the defects to round-off.
    """
    if not T > 0:
        raise ParameterError("T must be positive")
    if K < 8:
        raise ParameterError("need at least 8 nodes")
    n, m = dyn.n, dyn.m
    x0 = np.asarray(x0, dtype=float)
    xgoal = np.asarray(xgoal, dtype=float)
    R = np.eye(m) if R is None else np.asarray(R, dtype=float)
    tau = cheb_nodes(K)[::-1]  # increasing
    t = 0.5 * T * (tau + 1.0)
    D = cheb_diff_matrix(K)[::-1, ::-1] * (2.0 / T)
    wq = clenshaw_curtis_weights(K)[::-1] * (0.5 * T)
    B = np.asarray(dyn.B(x0))
    nX = K * n
    if box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        if lo.shape != (n,) or hi.shape != (n,) or np.any(hi <= lo):
            raise ParameterError("box must be (lower, upper) with lower < upper")
        for name, x in (("x0", x0), ("xgoal", xgoal)):
            if np.any(x <= lo) or np.any(x >= hi):
                raise ParameterError(f"{name} lies outside the state box")
        if not barrier > 0:
            raise ParameterError("barrier weight must be positive")
        inner = slice(n, nX - n)  # interior nodes; the end nodes are pinned
        LO, HI = np.tile(lo, K - 2), np.tile(hi, K - 2)

    def unpack(v):
        return v[:nX].reshape(K, n), v[nX:].reshape(K, m)

    def cost(v):
        _, U = unpack(v)
        return float(np.einsum("k,ki,ij,kj->", wq, U, R, U))

    def objective(v):
        _, U = unpack(v)
        g = np.zeros_like(v)
        g[nX:] = (2.0 * wq[:, None] * (U @ R)).ravel()
        val = cost(v)
        if box is not None:
            up, dn = HI - v[inner], v[inner] - LO
            if np.any(up <= 0) or np.any(dn <= 0):
                return np.inf, g
            val -= barrier * float(np.sum(np.log(up)) + np.sum(np.log(dn)))
            g[inner] += barrier * (1.0 / up - 1.0 / dn)
        return val, g

    def step_limit(v, dv):
        if box is None:
            return 1.0
        d = dv[inner]
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(d > 0, (HI - v[inner]) / d, np.where(d < 0, (LO - v[inner]) / d, np.inf))
        return float(min(1.0, 0.99 * room.min()))

    def cons(v):
        X, U = unpack(v)
        defect = D @ X - dyn.f(X) - U @ B.T
        return np.concatenate([defect.ravel(), X[0] - x0, X[-1] - xgoal])

    DI = np.kron(D, np.eye(n))

    def cons_jac(v):
        X, _ = unpack(v)
        Jx = DI - sla.block_diag(*dyn.jac_f(X))
        Ju = -np.kron(np.eye(K), B)
        top = np.hstack([Jx, Ju])
        bc = np.zeros((2 * n, len(v)))
        bc[:n, :n] = np.eye(n)
        bc[n:, nX - n:nX] = np.eye(n)
        return np.vstack([top, bc])

    s = (t / T)[:, None]
    X_init = (1 - s) * x0 + s * xgoal
    U_init = np.tile(_equilibrium_input(dyn, xgoal), (K, 1))
    v0 = np.concatenate([X_init.ravel(), U_init.ravel()])
    H0 = np.zeros((len(v0), len(v0)))
    H0[nX:, nX:] = 2.0 * np.kron(np.diag(wq), R)

    def hessians(v, lam):
        base = H0.copy()
        if box is not None:
            i = np.arange(n, nX - n)
            base[i, i] += barrier * (1.0 / (HI - v[inner]) ** 2 + 1.0 / (v[inner] - LO) ** 2)
        if lam is None:
            return [base]
        # second derivative of lam' defect in X, by central differences of jac_f
        X, _ = unpack(v)
        L = lam[:nX].reshape(K, n)
        h = 1e-6
        Hk = np.empty((K, n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            Jp, Jm = np.asarray(dyn.jac_f(X + e)), np.asarray(dyn.jac_f(X - e))
            Hk[:, :, j] = -np.einsum("ki,kij->kj", L, Jp - Jm) / (2 * h)
        H = base.copy()
        H[:nX, :nX] += sla.block_diag(*(0.5 * (Hk + Hk.transpose(0, 2, 1))))
        return [H, base]

    with np.errstate(all="ignore"):
        v, iters, message = _sqp(objective, cons, cons_jac, hessians, v0, max_iters, tol, step_limit)
    # Gauss-Newton feasibility polish (minimum-norm corrections)
    for _ in range(10):
        c = cons(v)
        if not np.all(np.isfinite(c)) or np.abs(c).max() < 1e-11:
            break
        dv = np.linalg.lstsq(cons_jac(v), -c, rcond=None)[0]
        v = v + dv
    X, U = unpack(v)
    c = cons(v)
    resid = float(np.abs(c[:nX]).max()) if np.all(np.isfinite(c)) else np.inf
    bres = float(np.abs(c[nX:]).max()) if np.all(np.isfinite(c)) else np.inf
    ok = bool(np.isfinite(resid) and resid <= tol and bres <= tol and np.all(np.isfinite(v)))
    return Trajectory(t, X, U, float(T), cost(v), resid, bres, ok, message)


# TV-LQR ------------------------------------------------------------------------


@dataclass(eq=False)
class Gains:
    t: np.ndarray  # (K,) node times
    K: np.ndarray  # (K, m, n)
    P: np.ndarray  # (K, n, n)
    terminal: str = "are"

    def at(self, t) -> np.ndarray:
        tt = np.clip(t, self.t[0], self.t[-1])
        out = barycentric_interpolate(self.t, barycentric_weights(len(self.t)), self.K, tt)
        return out[0] if np.ndim(t) == 0 else out


def zero_gains(traj: Trajectory, m: int, n: int) -> Gains:
    K = len(traj.t)
    return Gains(traj.t, np.zeros((K, m, n)), np.zeros((K, n, n)), "none")


def tvlqr_gains(dyn, traj: Trajectory, Q=None, R=None, terminal="are", rtol: float = 1e-9, atol: float = 1e-10) -> Gains:
    """Backward Riccati integration along the trajectory.

    -dP/dt = A'P + PA - P B R^-1 B' P + Q with A = df/dx(x*(t)); gains
    K = R^-1 B' P are stored at the trajectory nodes.  terminal is "are"
    (stabilizing solution at the endpoint linearization; falls back to Q if
    that linearization is not stabilizable) or an explicit matrix.
    """
    n, m = dyn.n, dyn.m
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(m) if R is None else np.asarray(R, dtype=float)
    if np.linalg.eigvalsh(R)[0] <= 0 or np.linalg.eigvalsh(0.5 * (Q + Q.T))[0] < -1e-12:
        raise ParameterError("need Q >= 0 and R > 0")
    B = np.asarray(dyn.B(traj.X[-1]))
    Rinv = np.linalg.inv(R)
    BRB = B @ Rinv @ B.T
    label = "matrix"
    if isinstance(terminal, str):
        if terminal != "are":
            raise ParameterError(f"unknown terminal cost {terminal!r}")
        A_T = np.asarray(dyn.jac_f(traj.X[-1]))
        try:
            PT = sla.solve_continuous_are(A_T, B, Q, R)
            label = "are"
            if not np.all(np.isfinite(PT)):
                raise ValueError("non-finite")
        except (np.linalg.LinAlgError, ValueError):
            PT = Q.copy()
            label = "are-fallback-Q"
    else:
        PT = np.asarray(terminal, dtype=float)
    T = traj.T
    bw = barycentric_weights(len(traj.t))

    def rhs(tau, p):
        # tau = T - t runs forward
        P = p.reshape(n, n)
        x = barycentric_interpolate(traj.t, bw, traj.X, T - tau)[0]
        A = np.asarray(dyn.jac_f(x))
        dP = A.T @ P + P @ A - P @ BRB @ P + Q
        return dP.ravel()

    taus = np.sort(T - traj.t)
    sol = solve_ivp(rhs, (0.0, T), PT.ravel(), t_eval=taus, rtol=rtol, atol=atol, method="RK45")
    if sol.status != 0 or sol.y.shape[1] != len(taus):
        raise NumericError(f"Riccati integration failed near t = {T - sol.t[-1]:.4g}: {sol.message}")
    Ps = sol.y.T.reshape(-1, n, n)[::-1]  # ordered by increasing t
    times = T - taus[::-1]
    out_P = np.empty_like(Ps)
    for i, (ti, P) in enumerate(zip(times, Ps)):
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise NumericError(f"Riccati solution blew up at t = {ti:.4g}")
        mn = np.linalg.eigvalsh(P)[0]
        if mn < -1e-8 * max(1.0, np.abs(P).max()):
            raise NumericError(f"Riccati solution lost positive semidefiniteness at t = {ti:.4g}")
        out_P[i] = P
    Ks = np.einsum("ij,jk,tkl->til", Rinv, B.T, out_P)
    return Gains(traj.t.copy(), Ks, out_P, label)


# rollouts ------------------------------------------------------------------------


@dataclass(eq=False)
class TrackingResult:
    rms: float
    max_error: float
    diverged: bool
    t: np.ndarray
    X: np.ndarray
    X_ref: np.ndarray
    U: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.X - self.X_ref, axis=1)


def rollout_tracking(true_dyn, traj: Trajectory, gains: Gains | None, x_init, dt: float = 0.01, threshold: float = 50.0) -> TrackingResult:
    """Simulate u = u*(t) + K(t)(x*(t) - x) on the true dynamics with RK4."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    steps = int(np.ceil(traj.T / dt - 1e-9))
    times = np.minimum(np.arange(steps + 1) * dt, traj.T)
    X_ref = traj.state(times)
    U_ref = traj.input(times)
    Ks = gains.at(times) if gains is not None else None
    deriv = getattr(true_dyn, "derivative", None) or (lambda x, u: true_dyn.f(x) + true_dyn.B(x) @ u)
    x = np.asarray(x_init, dtype=float).copy()
    xs, us = [x.copy()], []
    diverged = False
    for i in range(steps):
        u = U_ref[i] if Ks is None else U_ref[i] + Ks[i] @ (X_ref[i] - x)
        us.append(u)
        h = times[i + 1] - times[i]
        try:
            x = rk4_step(deriv, x, u, h)
        except NumericError:
            diverged = True
            break
        xs.append(x.copy())
        if np.linalg.norm(x - X_ref[i + 1]) > threshold:
            diverged = True
            break
    X = np.array(xs)
    Xr = X_ref[: len(X)]
    err = np.linalg.norm(X - Xr, axis=1)
    if us:
        us.append(us[-1])
    U = np.array(us) if us else np.zeros((1, traj.U.shape[1]))
    return TrackingResult(float(np.sqrt(np.mean(err**2))), float(err.max()), diverged, times[: len(X)], X, Xr, U[: len(X)])


# geodesics and the CCM controller ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConstantMetric:
    """Dual metric W constant in x (M = W^-1)."""

    Wmat: np.ndarray

    @property
    def n(self) -> int:
        return self.Wmat.shape[0]

    def W(self, x):
        x = np.asarray(x)
        return np.broadcast_to(self.Wmat, x.shape[:-1] + self.Wmat.shape).copy()

    def W_partials(self, x):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + self.Wmat.shape + (self.n,))


@dataclass(eq=False)
class Geodesic:
    s: np.ndarray  # quadrature nodes in (0, 1)
    gamma: np.ndarray  # curve at the nodes
    dgamma: np.ndarray  # derivative at the nodes
    energy: float
    converged: bool
    d_start: np.ndarray  # gamma'(0)
    d_end: np.ndarray  # gamma'(1)
    history: list = field(default_factory=list)


def _geodesic_basis(s: np.ndarray, p: int):
    """phi_i(s) = s (1 - s) T_i(2 s - 1) and derivatives, shape (len(s), p)."""
    y = 2 * s - 1
    T = np.zeros((len(s), p))
    dT = np.zeros((len(s), p))
    for i in range(p):
        c = np.zeros(i + 1)
        c[i] = 1.0
        T[:, i] = np.polynomial.chebyshev.chebval(y, c)
        dT[:, i] = 2.0 * np.polynomial.chebyshev.chebval(y, np.polynomial.chebyshev.chebder(c))
    q = (s * (1 - s))[:, None]
    dq = (1 - 2 * s)[:, None]
    return q * T, dq * T + q * dT


def geodesic(metric, x_star, x, n_nodes: int = 12, degree: int = 4, max_iters: int = 200, gtol: float = 1e-10) -> Geodesic:
    """Minimize sum_q w_q g'(s_q)' M(g(s_q)) g'(s_q) over straight line plus
    polynomial deviations vanishing at both ends (Gauss-Legendre nodes)."""
    x_star = np.asarray(x_star, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(x)
    gl, gw = np.polynomial.legendre.leggauss(n_nodes)
    s = 0.5 * (gl + 1)
    w = 0.5 * gw
    phi, dphi = _geodesic_basis(s, degree)
    ends_phi, ends_dphi = _geodesic_basis(np.array([0.0, 1.0]), degree)
    diff = x - x_star

    def curve(cvec):
        C = cvec.reshape(degree, n)
        g = x_star + s[:, None] * diff + phi @ C
        dg = diff + dphi @ C
        return g, dg, C

    def energy_grad(cvec):
        g, dg, _ = curve(cvec)
        W = metric.W(g)
        Mdg = np.linalg.solve(W, dg[..., None])[..., 0]
        E = float(np.sum(w * np.einsum("qi,qi->q", dg, Mdg)))
        dW = metric.W_partials(g)
        # d/dx_j (v' M v) = -(M v)' dW_j (M v)
        gx = -np.einsum("qa,qabj,qb->qj", Mdg, dW, Mdg)
        grad = 2.0 * dphi.T @ (w[:, None] * Mdg) + phi.T @ (w[:, None] * gx)
        return E, grad.ravel()

    c0 = np.zeros(degree * n)
    history = [energy_grad(c0)[0]]
    converged = True
    if np.any(diff != 0):
        res = minimize(
            energy_grad,
            c0,
            jac=True,
            method="BFGS",
            options={"maxiter": max_iters, "gtol": gtol},
            callback=lambda ck: history.append(energy_grad(ck)[0]),
        )
        cbest = res.x
        converged = bool(res.success) or bool(np.linalg.norm(res.jac) < 1e-8)
        if not converged:
            log.warning("geodesic descent did not converge: %s", res.message)
    else:
        cbest = c0
    g, dg, C = curve(cbest)
    E = energy_grad(cbest)[0]
    d_start = diff + ends_dphi[0] @ C
    d_end = diff + ends_dphi[1] @ C
    return Geodesic(s, g, dg, E, converged, d_start, d_end, history)


@dataclass(frozen=True)
class FeedbackResult:
    k: np.ndarray
    energy: float
    Ed0: float  # energy derivative with k = 0
    Ed: float  # energy derivative at the returned k
    bound: float  # -2 lam E


def ccm_feedback(model, x_star, u_star, x, lam: float | None = None, metric=None, **geodesic_kwargs) -> FeedbackResult:
    """Least-norm input correction k with E_d(k) <= -2 lam E.

    E_d(k) = 2 g'(1)' M(x) (f(x) + B (u* + k)) - 2 g'(0)' M(x*) (f(x*) + B u*)
    is the first variation of the geodesic energy under the closed loop.
    """
    lam = getattr(model, "lam", None) if lam is None else lam
    if lam is None:
        raise ParameterError("contraction rate lam is required")
    metric = model if metric is None else metric
    x_star = np.asarray(x_star, dtype=float)
    x = np.asarray(x, dtype=float)
    u_star = np.asarray(u_star, dtype=float)
    geo = geodesic(metric, x_star, x, **geodesic_kwargs)
    E = geo.energy
    B = np.asarray(model.B(x))
    M1 = np.linalg.inv(metric.W(x))
    M0 = np.linalg.inv(metric.W(x_star))
    row = M1 @ geo.d_end
    a = 2.0 * row @ (model.f(x) + B @ u_star) - 2.0 * (M0 @ geo.d_start) @ (model.f(x_star) + B @ u_star)
    b = 2.0 * B.T @ row
    bound = -2.0 * lam * E
    if a <= bound:
        k = np.zeros(len(u_star))
    else:
        bb = float(b @ b)
        if bb == 0.0:
            raise NumericError("CCM controller undefined: geodesic end direction is orthogonal to the input directions")
        k = -((a - bound) / bb) * b
    return FeedbackResult(k, E, float(a), float(a + b @ k), bound)


# batch evaluation ------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    n_ic: int = 20
    ic_seed: int = 7
    r_min: float = 4.0
    r_max: float = 12.0
    phi_max: float = 0.35
    v_max: float = 1.0
    phi_dot_max: float = 0.5
    t_base: float = 3.0  # T = t_base + t_per_meter * distance to the goal
    t_per_meter: float = 0.6
    nodes: int = 40
    dt: float = 0.01
    threshold: float = 50.0
    q_diag: tuple = (1.0,) * 6
    r_diag: tuple = (1.0, 1.0)
    open_loop: bool = False
    bounded: bool = True  # plans stay inside the state box below
    x_lower: tuple = StateBox().lower
    x_upper: tuple = StateBox().upper
    barrier: float = 1e-4
    plan_iters: int = 500


def sample_initial_conditions(cfg: EvalConfig) -> np.ndarray:
    """Initial states with positions on the annulus r_min <= |p| <= r_max."""
    rng = np.random.Generator(np.random.PCG64(cfg.ic_seed))
    r = np.sqrt(rng.uniform(cfg.r_min**2, cfg.r_max**2, cfg.n_ic))
    ang = rng.uniform(0, 2 * np.pi, cfg.n_ic)
    X = np.zeros((cfg.n_ic, 6))
    X[:, 0] = r * np.cos(ang)
    X[:, 1] = r * np.sin(ang)
    X[:, 2] = rng.uniform(-cfg.phi_max, cfg.phi_max, cfg.n_ic)
    X[:, 3:5] = rng.uniform(-cfg.v_max, cfg.v_max, (cfg.n_ic, 2))
    X[:, 5] = rng.uniform(-cfg.phi_dot_max, cfg.phi_dot_max, cfg.n_ic)
    return X


def final_time(cfg: EvalConfig, x0, goal) -> float:
    return float(cfg.t_base + cfg.t_per_meter * np.linalg.norm(np.asarray(x0)[:2] - np.asarray(goal)[:2]))


@dataclass(frozen=True)
class CaseResult:
    model: str
    ic: int
    status: str  # "ok", "diverged", or a failure description
    rms: float
    max_error: float
    diverged: bool
    T: float
    plan_residual: float


def box_stats(values) -> dict:
    """Quartiles, 1.5 IQR whiskers and outlier count (linear-interpolated quantiles)."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return dict(q1=np.nan, median=np.nan, q3=np.nan, whisker_lo=np.nan, whisker_hi=np.nan, n_outliers=0)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_lim, hi_lim = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_lim) & (v <= hi_lim)]
    return dict(
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        whisker_lo=float(inside.min()),
        whisker_hi=float(inside.max()),
        n_outliers=int(np.sum((v < lo_lim) | (v > hi_lim))),
    )


@dataclass(eq=False)
class EvalReport:
    cases: list
    summary: dict  # model -> stats dict
    tracks: dict  # (model, ic) -> (Trajectory, TrackingResult) for requested cases


def evaluate_case(dyn, true_dyn, x0, goal, cfg: EvalConfig):
    T = final_time(cfg, x0, goal)
    box = (cfg.x_lower, cfg.x_upper) if cfg.bounded else None
    traj = trajopt_chebyshev(dyn, x0, goal, T, np.diag(cfg.r_diag), cfg.nodes, cfg.plan_iters, box=box, barrier=cfg.barrier)
    if not traj.success:
        return traj, None, f"trajopt-failed ({traj.message.strip()}; defect {traj.residual:.2e})"
    if cfg.open_loop:
        gains = None
    else:
        try:
            gains = tvlqr_gains(dyn, traj, np.diag(cfg.q_diag), np.diag(cfg.r_diag))
        except NumericError as exc:
            return traj, None, f"tvlqr-failed ({exc})"
    track = rollout_tracking(true_dyn, traj, gains, x0, cfg.dt, cfg.threshold)
    return traj, track, "diverged" if track.diverged else "ok"


def batch_evaluate(models: dict, initial_conditions, true_dyn, cfg: EvalConfig, goal=None, keep=()) -> EvalReport:
    """Plan with each model and track on the true dynamics from every initial condition.

    models maps a name to a dynamics object; keep lists (name, ic index)
    pairs whose time series are retained.
    """
    goal = np.zeros(6) if goal is None else np.asarray(goal, dtype=float)
    ics = np.asarray(initial_conditions, dtype=float)
    keep = set(keep)
    cases, tracks = [], {}
    for name in sorted(models):
        dyn = models[name]
        for i, x0 in enumerate(ics):
            try:
                traj, track, status = evaluate_case(dyn, true_dyn, x0, goal, cfg)
            except (NumericError, np.linalg.LinAlgError, ValueError) as exc:
                traj, track, status = None, None, f"error ({exc})"
            if track is None:
                cases.append(CaseResult(name, i, status, np.nan, np.nan, False, final_time(cfg, x0, goal), np.nan if traj is None else traj.residual))
            else:
                cases.append(CaseResult(name, i, status, track.rms, track.max_error, track.diverged, traj.T, traj.residual))
            if (name, i) in keep:
                tracks[(name, i)] = (traj, track)
            log.info("%s ic %d: %s rms %.4g", name, i, status, cases[-1].rms)
    summary = {}
    for name in sorted(models):
        mine = [c for c in cases if c.model == name]
        done = [c.rms for c in mine if np.isfinite(c.rms)]
        st = box_stats(done)
        st["n_cases"] = len(mine)
        st["n_diverged"] = int(sum(c.diverged for c in mine))
        st["n_failed"] = int(sum(not np.isfinite(c.rms) for c in mine))
        summary[name] = st
    return EvalReport(cases, summary, tracks)


# report files ---------------------------------------------------------------------

CASE_COLUMNS = ("model", "ic", "status", "rms", "max_error", "diverged", "T", "plan_residual")
SUMMARY_COLUMNS = ("model", "n_cases", "n_diverged", "n_failed", "q1", "median", "q3", "whisker_lo", "whisker_hi", "n_outliers")
SERIES_COLUMNS = ("t",) + tuple(f"x{i}" for i in range(1, 7)) + tuple(f"xref{i}" for i in range(1, 7)) + ("u1", "u2", "error")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        # statuses may carry solver messages; keep them one CSV field
        return '"' + v.replace('"', "'").replace("\n", " ") + '"' if ("," in v or '"' in v) else v
    return f"{float(v):.17g}"


def _write_rows(path, columns, rows, header=()) -> None:
    with open(path, "w", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n" if line else "#\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def write_cases_csv(path, report: EvalReport, header=()) -> None:
    rows = [[getattr(c, k) for k in CASE_COLUMNS] for c in report.cases]
    _write_rows(path, CASE_COLUMNS, rows, header)


def write_summary_csv(path, report: EvalReport, header=()) -> None:
    rows = [[name] + [report.summary[name][k] for k in SUMMARY_COLUMNS[1:]] for name in sorted(report.summary)]
    _write_rows(path, SUMMARY_COLUMNS, rows, header)


def write_series_csv(path, traj: Trajectory, track: TrackingResult | None, header=()) -> None:
    """Time series of one case; without a rollout only the plan is written."""
    if track is None:
        t = traj.t
        X = np.full((len(t), 6), np.nan)
        Xr, U = traj.X, traj.U
    else:
        t, X, Xr, U = track.t, track.X, track.X_ref, track.U
    err = np.linalg.norm(X - Xr, axis=1)
    rows = [[t[i], *X[i], *Xr[i], *U[i], err[i]] for i in range(len(t))]
    _write_rows(path, SERIES_COLUMNS, rows, header)


def read_cases_csv(path) -> list:
    """Per-case rows as dicts; numeric fields parsed to float."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CASE_COLUMNS:
        raise ParameterError(f"{path}: not a per-case report (bad header)")
    out = []
    for row in reader:
        try:
            out.append(
                dict(
                    model=row["model"],
                    ic=int(row["ic"]),
                    status=row["status"],
                    rms=float(row["rms"]),
                    max_error=float(row["max_error"]),
                    diverged=bool(int(row["diverged"])),
                    T=float(row["T"]),
                    plan_residual=float(row["plan_residual"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"{path}: malformed row ({exc})") from exc
    return out
