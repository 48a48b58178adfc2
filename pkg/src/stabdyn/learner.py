"""Ridge baselines and the contraction-regularized alternating learner.

Each outer iteration k
  1. fits (alpha, beta) with the metric frozen, subject to the stability
     LMI relaxed by per-point slacks bounded by the previous worst value;
  2. moves the metric coefficients by a penalized Newton method until W is
     uniformly positive definite on the active set, giving a new slack bound;
  3. fits the metric coefficients with the dynamics frozen;
  4. exchanges active constraint points based on their violation.

Metric coefficients are handled as one vector theta_t = [c, theta.ravel()]
(see model.MetricParams).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import conic
from .ccm import violation_parts
from .conic import LMIBatch, smat, svec
from .errors import InfeasibleError, NumericError, ParameterError
from .model import DynamicsParams, LearnedModel, MetricParams, initial_metric

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    mu_f: float = 1e-3
    mu_b: float = 1e-6
    mu_w: float = 1e-3
    mu_s: float = 0.01
    eps_lambda: float = 0.1
    delta_wlow: float = 0.1
    eps_wlow: float = 0.1
    delta: float = 0.05
    L: int = 50
    Nc0: int = 250
    Nmax: int = 15
    eps: float = 0.01
    sigma_smooth: float = 1e-3
    ub_margin: float = 0.01  # the definiteness penalty aims this far above the floor
    ub_penalty: str = "spectral"  # or "max-eig" (smoothed top eigenvalue)
    seed: int = 0
    newton_iters: int = 50
    mu_floor: float = 1e-12
    conic_tol: float = 1e-7
    conic_max_iters: int = 200

    def validate(self) -> "TrainConfig":
        for name in ("lam", "eps_lambda", "delta_wlow", "eps_wlow", "delta", "eps", "sigma_smooth", "ub_margin", "conic_tol"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 < self.mu_s < 1:
            raise ParameterError("mu_s must lie in (0, 1)")
        if self.mu_f < 0 or self.mu_b < 0 or not self.mu_w > 0:
            raise ParameterError("regularization weights must be non-negative (mu_w positive)")
        if self.L < 1 or self.Nc0 < 0 or self.Nmax < 0 or self.newton_iters < 1:
            raise ParameterError("L must be >= 1 and counts non-negative")
        if self.ub_penalty not in ("spectral", "max-eig"):
            raise ParameterError("ub_penalty must be 'spectral' or 'max-eig'")
        return self

    @property
    def rate(self) -> float:
        return self.lam + self.eps_lambda

    @property
    def w_floor(self) -> float:
        return self.delta_wlow + self.eps_wlow


# regression ---------------------------------------------------------------


def design_matrix(model: LearnedModel, X, U) -> np.ndarray:
    """Rows (i, a) map [alpha, beta] to the a-th entry of f(x_i) + B u_i."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    N, n = X.shape
    Z = model.f_map.scalar(X)
    Da = np.einsum("ik,ab->iakb", Z, np.eye(n)).reshape(N * n, -1)
    Db = np.einsum("ij,ra->iajr", U, model.b_map.matrix).reshape(N * n, -1)
    return np.hstack([Da, Db])


def regression_error(model: LearnedModel, dataset) -> float:
    """Mean over tuples of |f(x) + B u - xdot|."""
    pred = model.f(dataset.X) + dataset.U @ model.B().T
    return float(np.mean(np.linalg.norm(pred - dataset.Xdot, axis=1)))


def _reg_weights(model: LearnedModel, mu_f: float, mu_b: float) -> np.ndarray:
    return np.concatenate([np.full(model.f_map.d, mu_f), np.full(model.m * model.b_map.d, mu_b)])


def train_ridge(dataset, model: LearnedModel, mu_f: float, mu_b: float, center: DynamicsParams | None = None) -> DynamicsParams:
    """Minimizer of sum |f(x_i) + B u_i - xdot_i|^2 + mu_f|alpha - a0|^2 + mu_b sum|beta_j - b0_j|^2."""
    if len(dataset) < 1:
        raise ParameterError("empty dataset")
    if mu_f < 0 or mu_b < 0:
        raise ParameterError("regularization weights must be non-negative")
    D = design_matrix(model, dataset.X, dataset.U)
    y = dataset.Xdot.ravel()
    w = _reg_weights(model, mu_f, mu_b)
    w0 = np.zeros(D.shape[1]) if center is None else center.vector()
    # stacked least squares [D; sqrt(w) I] v = [y; sqrt(w) w0]
    M = np.vstack([D, np.diag(np.sqrt(w))])
    rhs = np.concatenate([y, np.sqrt(w) * w0])
    sol, _, rank, _ = sla.lstsq(M, rhs, lapack_driver="gelsd")
    if rank < D.shape[1]:
        raise NumericError(
            "normal matrix is singular; increase mu_f and/or mu_b (mu_b > 0 is needed for a rank-deficient input map)"
        )
    return DynamicsParams.from_vector(sol, model.f_map.d, model.m)


# LMI coefficient assembly ---------------------------------------------------


def dynamics_lmi_coefficients(model: LearnedModel, X, rate: float) -> tuple:
    """(F0, C): stability block = F0 + mat(C @ alpha) with the metric frozen.

    F0 = 2 rate W_perp, C has shape (N, svec(n-m), d_f).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, k = model.n, model.n - model.m
    Z = model.f_map.scalar(X)  # (N, 2s)
    dZ = model.f_map.scalar_grad(X)  # (N, 2s, n)
    W = model.W(X)
    dW = model.W_partials(X)[:, :k, :k, :]  # (N, k, k, n)
    g = np.einsum("jab,jsb->jsa", W, dZ)[:, :, :k]  # (W grad z_s) restricted, (N, 2s, k)
    N, S2 = Z.shape
    C = -Z[:, :, None, None, None] * np.moveaxis(dW, -1, 1)[:, None]  # (N, 2s, n, k, k)
    for i in range(k):
        C[:, :, i, i, :] += g
        C[:, :, i, :, i] += g
    C = svec(C).reshape(N, S2 * n, -1)
    F0 = 2.0 * rate * W[:, :k, :k]
    return F0, np.swapaxes(C, 1, 2)


def metric_lmi_coefficients(model: LearnedModel, X, rate: float) -> tuple:
    """Linear maps theta_t -> svec(F) and theta_t -> svec(W) with dynamics frozen.

    Returns (CF, CW) with shapes (N, svec(n-m), P) and (N, svec(n), P).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, k = model.n, model.n - model.m
    lay = model.layout
    phi = model.pair_features(X)  # (N, p, dw)
    f = model.f(X)
    dphi = np.einsum("jpwl,jl->jpw", model.pair_feature_grads(X), f)
    J = model.jac_f(X)
    S = lay.basis()
    N = len(X)
    I = np.eye(n)
    T_off = J + np.swapaxes(J, -1, -2) + 2.0 * rate * I
    JS = np.einsum("jab,pbc->jpac", J, S)
    T = JS + np.swapaxes(JS, -1, -2) + 2.0 * rate * S
    sT = svec(T[..., :k, :k])  # (N, p, svk)
    sS = svec(S[:, :k, :k])  # (p, svk)
    CF_pairs = sT[:, :, :, None] * phi[:, :, None, :] - sS[None, :, :, None] * dphi[:, :, None, :]
    CF = np.concatenate([svec(T_off[:, :k, :k])[:, :, None], _flatten_pairs(CF_pairs)], axis=2)
    sSf = svec(S)  # (p, svn)
    CW_pairs = sSf[None, :, :, None] * phi[:, :, None, :]
    CW = np.concatenate([np.broadcast_to(svec(I), (N, sSf.shape[1]))[:, :, None], _flatten_pairs(CW_pairs)], axis=2)
    return CF, CW


def _flatten_pairs(A):
    """(N, p, r, w) -> (N, r, p * w)."""
    N, p, r, w = A.shape
    return np.ascontiguousarray(np.moveaxis(A, 1, 2).reshape(N, r, p * w))


# sub-problems -----------------------------------------------------------------


@dataclass
class TrainState:
    k: int
    model: LearnedModel
    active: np.ndarray  # indices into X_c
    s_bar: float  # worst stability eigenvalue over X_c at the previous iterate
    converged: bool = False
    reason: str = ""


def build_dynamics_problem(model: LearnedModel, dataset, Xa, s_cap: float, config: TrainConfig, center: DynamicsParams):
    """Conic form of the dynamics sub-problem; variables [alpha, beta, s]."""
    D = design_matrix(model, dataset.X, dataset.U)
    y = dataset.Xdot.ravel()
    nv = D.shape[1]
    na = len(Xa)
    nx = nv + na
    w = _reg_weights(model, config.mu_f, config.mu_b)
    v0 = center.vector()
    Q = np.zeros((nx, nx))
    Q[:nv, :nv] = 2.0 * (D.T @ D + np.diag(w))
    c = np.zeros(nx)
    c[:nv] = -2.0 * (D.T @ y + w * v0)
    c[nv:] = config.mu_s
    const = float(y @ y + v0 @ (w * v0))
    lmis = []
    G = h = None
    if na:
        F0, C = dynamics_lmi_coefficients(model, Xa, config.rate)
        k = F0.shape[-1]
        slack = np.arange(nv, nx)
        lmis.append(
            LMIBatch(F0, C, cols=np.arange(model.f_map.d), private=slack, private_coef=np.broadcast_to(-svec(np.eye(k)), (na, k * (k + 1) // 2)).copy())
        )
        G = sp.hstack([sp.csr_matrix((2 * na, nv)), sp.vstack([-sp.eye(na), sp.eye(na)])]).tocsr()
        h = np.concatenate([np.zeros(na), np.full(na, s_cap)])
    return conic.ConicProblem(Q, c, G=G, h=h, lmis=lmis), const


def solve_dynamics_subproblem(state: TrainState, dataset, X_c, config: TrainConfig):
    """Returns (DynamicsParams, slack vector, objective value)."""
    model = state.model
    Xa = np.asarray(X_c, dtype=float)[state.active] if len(state.active) else np.zeros((0, model.n))
    cap = max(state.s_bar, 0.0)
    prob, const = build_dynamics_problem(model, dataset, Xa, cap, config, model.dynamics)
    sol = conic.solve(prob, config.conic_tol, config.conic_max_iters)
    if sol.status == conic.INFEASIBLE:
        raise InfeasibleError(f"dynamics sub-problem infeasible at iteration {state.k}")
    if sol.status != conic.OPTIMAL:
        log.warning("dynamics sub-problem at iteration %d ended with status %s", state.k, sol.status)
    nv = model.f_map.d + model.m * model.b_map.d
    dyn = DynamicsParams.from_vector(sol.x[:nv], model.f_map.d, model.m)
    return dyn, sol.x[nv:], sol.objective + const


def metric_w_rowblocks(model: LearnedModel, X) -> tuple:
    """Row-block form of the theta part of svec(W): (rowfeat (N, svn, d_w), row_cols (svn, d_w)).

    Row r of svec(W) depends only on the coefficients of pair r, which sit
    at columns 1 + r * d_w + arange(d_w) of the flattened metric vector.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phi = model.pair_features(X)  # (N, p, dw)
    p, dw = phi.shape[1:]
    scale = np.diag(svec(model.layout.basis()))  # svec(S_r) is nonzero in row r only
    rowfeat = scale[None, :, None] * phi
    row_cols = 1 + np.arange(p)[:, None] * dw + np.arange(dw)[None, :]
    return rowfeat, row_cols


def build_metric_problem(model: LearnedModel, Xa, s_cap: float, config: TrainConfig, center: np.ndarray):
    """Conic form of the metric sub-problem; variables [theta_t, w_lo, w_hi, s]."""
    na = len(Xa)
    CF = metric_lmi_coefficients(model, Xa, config.rate)[0]
    rowfeat, row_cols = metric_w_rowblocks(model, Xa)
    P = CF.shape[2]
    n, k = model.n, model.n - model.m
    i_lo, i_hi = P, P + 1
    slack = np.arange(P + 2, P + 2 + na)
    nx = P + 2 + na
    Q = np.zeros((nx, nx))
    Q[:P, :P] = 2.0 * config.mu_w * np.eye(P)
    c = np.zeros(nx)
    c[:P] = -2.0 * config.mu_w * center
    c[i_lo], c[i_hi] = -1.0, 1.0
    c[slack] = 1.0 / config.mu_s
    const = float(config.mu_w * center @ center)
    svk = k * (k + 1) // 2
    In = svec(np.eye(n))
    # dense part of the W blocks: the offset column and the w_lo / w_hi column
    dense = np.broadcast_to(np.stack([In, -In], axis=1), (na, len(In), 2))
    lmis = [
        LMIBatch(np.zeros((na, k, k)), CF, cols=np.arange(P), private=slack, private_coef=np.broadcast_to(-svec(np.eye(k)), (na, svk)).copy()),
        # (w_lo + eps_w) I - W <= 0
        LMIBatch(
            np.broadcast_to(config.eps_wlow * np.eye(n), (na, n, n)).copy(),
            -dense.copy(),
            cols=np.array([0, i_lo]),
            rowfeat=-rowfeat,
            row_cols=row_cols,
        ),
        # W - w_hi I <= 0
        LMIBatch(np.zeros((na, n, n)), dense.copy(), cols=np.array([0, i_hi]), rowfeat=rowfeat, row_cols=row_cols),
    ]
    G = sp.lil_matrix((2 * na + 1, nx))
    for j, s in enumerate(slack):
        G[j, s] = -1.0
        G[na + j, s] = 1.0
    G[2 * na, i_lo] = -1.0
    h = np.concatenate([np.zeros(na), np.full(na, s_cap), [-config.delta_wlow]])
    return conic.ConicProblem(Q, c, G=G.tocsr(), h=h, lmis=lmis), const


def solve_metric_subproblem(state: TrainState, X_c, s_up: float, config: TrainConfig, center: MetricParams):
    """Returns (MetricParams, slack vector, objective value).

    state.model carries the fresh dynamics; center holds the previous
    iterate's metric coefficients (the proximal center).
    """
    model = state.model
    Xa = np.asarray(X_c, dtype=float)[state.active]
    if len(Xa) == 0:
        return center, np.zeros(0), np.nan
    cap = max(s_up, 0.0)
    prob, const = build_metric_problem(model, Xa, cap, config, center.vector())
    sol = conic.solve(prob, config.conic_tol, config.conic_max_iters)
    if sol.status == conic.INFEASIBLE:
        raise InfeasibleError(
            f"metric sub-problem infeasible at iteration {state.k} (active points {len(Xa)}, slack bound {s_up:.6g})"
        )
    if sol.status != conic.OPTIMAL:
        log.warning("metric sub-problem at iteration %d ended with status %s", state.k, sol.status)
    P = prob.nx - 2 - len(Xa)
    met = MetricParams.from_vector(sol.x[:P], model.layout.size, sol.x[P], sol.x[P + 1])
    return met, sol.x[P + 2:], sol.objective + const


# smoothed maximum eigenvalue -----------------------------------------------------


def _top_eig_batch(G0, C, theta, z, sigma):
    """Top eigenpairs of G0 + mat(C theta) + (sigma/d) z z'."""
    d = G0.shape[-1]
    M = G0 + smat(C @ theta, d) + (sigma / d) * z[:, :, None] * z[:, None, :]
    if not np.all(np.isfinite(M)):
        raise NumericError("non-finite matrix in smoothed eigenvalue")
    try:
        lam, V = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigen decomposition failed: {exc}") from exc
    return lam, V


def _top_eig_derivatives(C, lam, V, gap_floor=1e-12):
    """Gradient rows (N, P) and scaled Hessian factors (N, d-1, P).

    The Hessian of the top eigenvalue is sum_k 2 h_k h_k' / (l_1 - l_k) with
    h_k = C' svec(sym(v_1 v_k')); the returned factors already carry the
    square root of the weight.  Gaps below gap_floor are clamped to it.
    """
    v1 = V[:, :, -1]
    grad = np.einsum("jr,jrp->jp", svec(v1[:, :, None] * v1[:, None, :]), C)
    Vk = V[:, :, :-1]
    sym = 0.5 * (v1[:, None, :, None] * Vk.transpose(0, 2, 1)[:, :, None, :] + Vk.transpose(0, 2, 1)[:, :, :, None] * v1[:, None, None, :])
    h = np.einsum("jkr,jrp->jkp", svec(sym), C)
    gaps = np.maximum(lam[:, -1:] - lam[:, :-1], gap_floor)
    return grad, h * np.sqrt(2.0 / gaps)[:, :, None]


def smoothed_max_eig_with_derivatives(G0, basis, theta, sigma_smooth: float, seed) -> tuple:
    """Top eigenvalue of G(theta) + (sigma/d) z z' with gradient and Hessian.

    G(theta) = G0 + sum_i theta_i basis[i]; z ~ N(0, I) drawn from `seed`
    (an int or a numpy Generator).  Gaps between the top eigenvalue and the
    others are clamped at 1e-12 in the Hessian.
    """
    if not sigma_smooth > 0:
        raise ParameterError("sigma_smooth must be positive")
    G0 = np.asarray(G0, dtype=float)
    basis = np.asarray(basis, dtype=float)
    d = G0.shape[0]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal(d)
    C = svec(basis).T[None]
    lam, V = _top_eig_batch(G0[None], C, np.asarray(theta, dtype=float), z[None], sigma_smooth)
    grad, hf = _top_eig_derivatives(C, lam, V)
    return float(lam[0, -1]), grad[0], hf[0].T @ hf[0]


@dataclass
class UpperBoundResult:
    s_up: float
    metric: MetricParams
    mu_final: float
    halvings: int
    newton_steps: int
    objective_history: list = field(default_factory=list)  # (weight, before, after) per accepted step


def spectral_penalty_with_derivatives(G0, C, theta, weight: float = 1.0) -> tuple:
    """sum_j sum_k psi(lambda_k(G_j)) with psi(t) = max(t, 0)^2, G_j = G0_j + mat(C_j theta).

    Returns (value, gradient, Hessian).  The function is convex and C1; the
    Hessian is the generalized one built from the divided differences
    (psi'(l_k) - psi'(l_l)) / (l_k - l_l), which lie in [0, 2].
    """
    d = G0.shape[-1]
    P = C.shape[-1]
    G = G0 + smat(C @ theta, d)
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite matrix in spectral penalty")
    try:
        lam, V = np.linalg.eigh(G)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigen decomposition failed: {exc}") from exc
    on = lam[:, -1] > 0
    if not np.any(on):
        return 0.0, np.zeros(P), np.zeros((P, P))
    lam, V, C = lam[on], V[on], C[on]
    lp = np.maximum(lam, 0.0)
    val = weight * float(np.sum(lp**2))
    grad = weight * np.einsum("jr,jrp->p", svec(np.einsum("jak,jk,jbk->jab", V, 2.0 * lp, V)), C)
    num = 2.0 * (lp[:, :, None] - lp[:, None, :])
    den = lam[:, :, None] - lam[:, None, :]
    close = np.abs(den) < 1e-12
    both = 2.0 * ((lam[:, :, None] > 0) | (lam[:, None, :] > 0))
    gam = np.where(close, both, num / np.where(close, 1.0, den))
    iu, ju = np.triu_indices(d)
    wts = weight * gam[:, iu, ju] * np.where(iu == ju, 1.0, 2.0)  # (N, pairs)
    vi, vj = V[:, :, iu], V[:, :, ju]  # (N, d, pairs)
    sym = 0.5 * (vi[:, :, None, :] * vj[:, None, :, :] + vj[:, :, None, :] * vi[:, None, :, :])
    h = np.einsum("jkr,jrp->jkp", svec(np.moveaxis(sym, -1, 1)), C)
    keep = wts > 0
    rows = h[keep] * np.sqrt(wts[keep])[:, None]
    return val, grad, rows.T @ rows


class _PenaltyProblem:
    """sum Psi(G_w) + mu sum Psi(G_F) + mu |theta - center|^2.

    G_w = w_target I - W with w_target a little above the definiteness
    floor, so minimizers clear the floor instead of approaching it from
    below.  Psi is psi(lmax(.)) with stochastic smoothing ("max-eig") or
    the spectral extension sum_k psi(lambda_k(.)) ("spectral"); both vanish
    exactly when G <= 0 and agree while at most one eigenvalue is positive.
    """

    def __init__(self, CF, CW, w_target, center, sigma, rng, kind="spectral"):
        n = int(round((np.sqrt(8 * CW.shape[1] + 1) - 1) / 2))
        k = int(round((np.sqrt(8 * CF.shape[1] + 1) - 1) / 2))
        self.terms = ((np.broadcast_to(w_target * np.eye(n), (len(CW), n, n)), -CW), (np.zeros((len(CF), k, k)), CF))
        self.center = center
        self.sigma = sigma
        self.rng = rng
        self.kind = kind
        self.z = [None, None]

    def draw(self):
        if self.kind == "max-eig":
            self.z = [self.rng.standard_normal(G0.shape[:2]) for G0, _ in self.terms]

    def _psi_sum(self, G0, C, theta, z):
        if self.kind == "spectral":
            lam = np.linalg.eigvalsh(G0 + smat(C @ theta, G0.shape[-1]))
            return float(np.sum(np.maximum(lam, 0) ** 2))
        top = _top_eig_batch(G0, C, theta, z, self.sigma)[0][:, -1]
        return float(np.sum(np.maximum(top, 0) ** 2))

    def value(self, theta, mu):
        dv = theta - self.center
        out = mu * float(dv @ dv)
        for (G0, C), z, wgt in zip(self.terms, self.z, (1.0, mu)):
            out += wgt * self._psi_sum(G0, C, theta, z)
        return out

    def derivatives(self, theta, mu):
        P = len(theta)
        val = mu * float((theta - self.center) @ (theta - self.center))
        grad = 2.0 * mu * (theta - self.center)
        H = 2.0 * mu * np.eye(P)
        for (G0, C), z, wgt in zip(self.terms, self.z, (1.0, mu)):
            if self.kind == "spectral":
                v, g, h = spectral_penalty_with_derivatives(G0, C, theta, wgt)
                val, grad, H = val + v, grad + g, H + h
                continue
            lam, V = _top_eig_batch(G0, C, theta, z, self.sigma)
            top = lam[:, -1]
            on = top > 0
            if not np.any(on):
                continue
            g, hf = _top_eig_derivatives(C[on], lam[on], V[on])
            t = top[on]
            val += wgt * float(np.sum(t**2))
            grad += wgt * 2.0 * (t @ g)
            rows = np.concatenate([np.sqrt(2.0 * wgt) * g, (np.sqrt(2.0 * wgt * t)[:, None, None] * hf).reshape(-1, P)])
            H += rows.T @ rows
        return val, grad, H


def compute_upper_bound(model: LearnedModel, Xa, config: TrainConfig, center: MetricParams, rng=None) -> UpperBoundResult:
    """Penalized Newton search for a metric that is uniformly positive
    definite on the active points, and the slack bound it implies."""
    Xa = np.asarray(Xa, dtype=float)
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(config.seed))
    CF, CW = metric_lmi_coefficients(model, Xa, config.rate)
    n = model.n
    theta = center.vector().copy()
    floor = config.w_floor

    def min_eig_W(th):
        return float(np.linalg.eigvalsh(smat(CW @ th, n))[:, 0].min()) if len(Xa) else np.inf

    prob = _PenaltyProblem(CF, CW, floor + config.ub_margin, center.vector(), config.sigma_smooth, rng, config.ub_penalty)
    mu = config.mu_w
    halvings = 0
    steps = 0
    history = []
    while min_eig_W(theta) < floor:
        if mu < config.mu_floor:
            raise InfeasibleError(
                f"no metric satisfying the definiteness bound found on {len(Xa)} active points (weight fell below {config.mu_floor:g})"
            )
        for _ in range(config.newton_iters):
            if min_eig_W(theta) >= floor:
                break
            prob.draw()
            val, grad, H = prob.derivatives(theta, mu)
            try:
                step = -sla.solve(H, grad, assume_a="pos")
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise NumericError(f"Newton system failed: {exc}") from exc
            slope = float(grad @ step)
            if slope > -1e-14 * max(1.0, abs(val)):
                break
            t = 1.0
            for _ in range(30):
                trial = prob.value(theta + t * step, mu)
                if trial <= val + 1e-4 * t * slope:
                    break
                t *= 0.5
            else:
                break
            history.append((mu, val, trial))
            theta = theta + t * step
            steps += 1
        if min_eig_W(theta) >= floor:
            break
        mu *= 0.5
        halvings += 1
    s_up = float(np.linalg.eigvalsh(smat(CF @ theta))[:, -1].max()) if len(Xa) else 0.0
    met = MetricParams.from_vector(theta, model.layout.size, center.w_lower, center.w_upper)
    log.debug("upper bound %.6g after %d halvings and %d Newton steps", s_up, halvings, steps)
    return UpperBoundResult(s_up, met, mu, halvings, steps, history)


# exchange -------------------------------------------------------------------------


def update_constraint_set(active, nu, delta: float, L: int) -> np.ndarray:
    """Keep active points with nu > -delta and admit up to L outside points
    with nu > 0, worst first (ties by ascending index)."""
    nu = np.asarray(nu, dtype=float)
    active = np.asarray(active, dtype=int)
    inside = np.zeros(len(nu), dtype=bool)
    inside[active] = True
    keep = active[nu[active] > -delta]
    cand = np.flatnonzero(~inside & (nu > 0))
    order = np.lexsort((cand, -nu[cand]))
    admit = cand[order[:L]]
    return np.sort(np.concatenate([keep, admit])).astype(int)


# outer loop ------------------------------------------------------------------------


@dataclass
class TraceRow:
    k: int
    nu_mean: float
    nu_lo: float
    nu_hi: float
    val_err: float
    val_frac_viol: float
    active_size: int
    delta: float
    train_err: float = np.nan
    nu_max: float = np.nan
    dyn_objective: float = np.nan
    metric_objective: float = np.nan
    s_bar: float = np.nan
    s_up: float = np.nan
    halvings: int = 0
    seconds: float = np.nan


TRACE_COLUMNS = ("k", "nu_mean", "nu_lo", "nu_hi", "val_err", "val_frac_viol", "active_size", "delta")
TRACE_EXTRA = ("train_err", "nu_max", "dyn_objective", "metric_objective", "s_bar", "s_up", "halvings", "seconds")


@dataclass
class TrainResult:
    model: LearnedModel
    trace: list
    converged: bool
    reason: str
    nu: np.ndarray  # per-point violation over X_c for the returned model
    active_history: list


def fraction_violated(model: LearnedModel, X, config: TrainConfig) -> float:
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        return 0.0
    s, d = violation_parts(model, X, config)
    return float(np.mean(np.maximum(s, d) > 0))


def train_ccm(dataset, X_c, config: TrainConfig, model: LearnedModel, validation=None) -> TrainResult:
    """Alternating contraction-regularized training.

    model supplies the feature maps and lambda; its coefficients are reset
    to zero dynamics and identity metric.  Nmax counts outer iterations.
    """
    config.validate()
    X_c = np.asarray(getattr(X_c, "points", X_c), dtype=float).reshape(-1, model.n)
    Nc = len(X_c)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    active = np.sort(rng.choice(Nc, size=min(config.Nc0, Nc), replace=False)) if Nc else np.zeros(0, dtype=int)
    zero = DynamicsParams(np.zeros(model.f_map.d), np.zeros((model.m, model.b_map.d)))
    cur = model.with_dynamics(zero).with_metric(initial_metric(model.n, model.m, model.w_map.d))
    cur = LearnedModel(cur.f_map, cur.b_map, cur.w_map, cur.w_hat_map, cur.dynamics, cur.metric, config.lam)

    def scan(m_):
        if not Nc:
            return 0.0, np.zeros(0)
        s, d = violation_parts(m_, X_c, config)
        return float(s.max()), np.maximum(s, d)

    s_bar, nu = scan(cur)
    state = TrainState(1, cur, active, s_bar)
    trace, actives = [], [active.copy()]
    try:
        return _alternate(dataset, X_c, config, validation, rng, state, scan, nu, trace, actives)
    except (NumericError, InfeasibleError) as exc:
        exc.partial_trace = trace  # rows of the iterations that completed
        raise


def _alternate(dataset, X_c, config, validation, rng, state, scan, nu, trace, actives) -> TrainResult:
    Nc = len(X_c)
    best = (np.inf, state.model, nu)
    for k in range(1, config.Nmax + 1):
        t0 = time.perf_counter()
        state.k = k
        prev = state.model
        dyn, _, dobj = solve_dynamics_subproblem(state, dataset, X_c, config)
        with_dyn = prev.with_dynamics(dyn)
        Xa = X_c[state.active]
        if len(Xa):
            ub = compute_upper_bound(with_dyn, Xa, config, prev.metric, rng)
            state.model = with_dyn.with_metric(ub.metric)
            met, _, mobj = solve_metric_subproblem(state, X_c, ub.s_up, config, prev.metric)
            s_up, halv = ub.s_up, ub.halvings
        else:
            met, mobj, s_up, halv = prev.metric, np.nan, np.nan, 0
        new = with_dyn.with_metric(met)
        s_bar, nu = scan(new)
        delta = max(
            np.abs(new.dynamics.alpha - prev.dynamics.alpha).max(initial=0.0),
            np.abs(new.dynamics.betas - prev.dynamics.betas).max(initial=0.0),
            np.abs(new.metric.vector() - prev.metric.vector()).max(initial=0.0),
        )
        mean = float(nu.mean()) if Nc else 0.0
        std = float(nu.std()) if Nc else 0.0
        row = TraceRow(
            k,
            mean,
            mean - 2.5 * std,
            mean + 2.5 * std,
            regression_error(new, validation) if validation is not None else np.nan,
            fraction_violated(new, validation.X, config) if validation is not None else np.nan,
            len(state.active),
            float(delta),
            regression_error(new, dataset),
            float(nu.max()) if Nc else 0.0,
            dobj,
            mobj,
            state.s_bar,
            s_up,
            halv,
            time.perf_counter() - t0,
        )
        trace.append(row)
        log.info(
            "iter %d: nu max %.4g mean %.4g, active %d, delta %.3g, train err %.4g, %.1fs",
            k, row.nu_max, row.nu_mean, row.active_size, delta, row.train_err, row.seconds,
        )
        worst = float(nu.max()) if Nc else -np.inf
        if worst <= best[0]:
            best = (worst, new, nu)
        state.model = new
        state.s_bar = s_bar
        if not Nc or np.all(nu < config.eps):
            return TrainResult(new, trace, True, "certificate", nu, actives)
        if delta < config.eps:
            return TrainResult(new, trace, True, "stall", nu, actives)
        state.active = update_constraint_set(state.active, nu, config.delta, config.L)
        actives.append(state.active.copy())
    return TrainResult(best[1], trace, False, "max-iterations", best[2], actives)


# CSV output ------------------------------------------------------------------------


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else f"{float(v):.17g}"


def write_trace_csv(path, trace, header=(), extra: bool = True) -> None:
    """One row per outer iteration.  Wall-clock time is left out so that
    the file is a deterministic function of the inputs."""
    cols = TRACE_COLUMNS + (tuple(c for c in TRACE_EXTRA if c != "seconds") if extra else ())
    with open(path, "w", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n" if line else "#\n")
        fh.write(",".join(cols) + "\n")
        for row in trace:
            fh.write(",".join(_fmt(getattr(row, c)) for c in cols) + "\n")


def read_trace_csv(path) -> list:
    """Rows of a trace file as dicts of floats."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ParameterError(f"{path}: empty trace file")
    cols = lines[0].split(",")
    if tuple(cols[: len(TRACE_COLUMNS)]) != TRACE_COLUMNS:
        raise ParameterError(f"{path}: not a trace file (bad header)")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(cols):
            raise ParameterError(f"{path}: malformed row {ln!r}")
        try:
            out.append({c: float(v) for c, v in zip(cols, parts)})
        except ValueError as exc:
            raise ParameterError(f"{path}: malformed row ({exc})") from exc
    return out


def write_nu_csv(path, X, nu, tags=None, header=()) -> None:
    """Per-point violation dump: x1..x6, nu (and the provenance tag if given)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    cols = [f"x{i + 1}" for i in range(n)] + ["nu"] + (["tag"] if tags is not None else [])
    with open(path, "w", newline="\n") as fh:
        for line in header:
            fh.write(f"# {line}\n" if line else "#\n")
        fh.write(",".join(cols) + "\n")
        for i, (x, v) in enumerate(zip(X, nu)):
            fields = [_fmt(a) for a in x] + [_fmt(v)]
            if tags is not None:
                fields.append(tags[i])
            fh.write(",".join(fields) + "\n")


def read_nu_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or "nu" not in lines[0].split(","):
        raise ParameterError(f"{path}: not a violation dump (bad header)")
    j = lines[0].split(",").index("nu")
    try:
        return np.array([float(ln.split(",")[j]) for ln in lines[1:]])
    except (ValueError, IndexError) as exc:
        raise ParameterError(f"{path}: malformed row ({exc})") from exc
