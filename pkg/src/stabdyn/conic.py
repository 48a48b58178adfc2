"""Primal-dual interior-point solver for small-block conic quadratic programs.

    minimize    1/2 x'Qx + c'x
    subject to  A x = b
                G x <= h                        (scalar inequalities)
                F_j(x) = F0_j + mat(C_j x) <= 0 (LMIs, negative semidefinite)

LMIs are grouped in batches of equally sized blocks.  The linear part of
a block is the sum of up to three terms:

  dense      coef_j @ x[cols]               shared columns, dense coefficients
  row-block  rowfeat_j[r] . x[row_cols[r]]  svec row r reads its own variables
  private    private_coef_j * x[private_j]  one scalar owned by block j

Symmetric matrices are vectorized with svec: upper triangle in row-major
order, off-diagonal entries scaled by sqrt(2), so svec(A).svec(B) = tr(AB).

The method is an infeasible-start path-following scheme with
Nesterov-Todd scaling and Mehrotra predictor-corrector steps.  Newton
systems are reduced to the dense Schur complement in the primal variables
and solved by Cholesky with iterative refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ParameterError

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"

SCHUR_REG = 1e-15  # relative diagonal regularization of the Schur complement
REFINE_STEPS = 3  # iterative refinement steps per Schur solve


# svec helpers -----------------------------------------------------------

_SVEC_CACHE: dict = {}


def _svec_index(d: int):
    if d not in _SVEC_CACHE:
        r, c = np.triu_indices(d)
        scale = np.where(r == c, 1.0, np.sqrt(2.0))
        basis = np.zeros((len(r), d, d))
        k = np.arange(len(r))
        basis[k, r, c] = 1.0 / scale
        basis[k, c, r] = 1.0 / scale
        _SVEC_CACHE[d] = (r, c, scale, basis)
    return _SVEC_CACHE[d]


def svec(M: np.ndarray) -> np.ndarray:
    """(..., d, d) symmetric -> (..., d(d+1)/2)."""
    r, c, scale, _ = _svec_index(M.shape[-1])
    return M[..., r, c] * scale


def smat(v: np.ndarray, d: int | None = None) -> np.ndarray:
    """Inverse of svec."""
    if d is None:
        d = int(round((np.sqrt(8 * v.shape[-1] + 1) - 1) / 2))
    r, c, scale, _ = _svec_index(d)
    out = np.zeros(v.shape[:-1] + (d, d))
    out[..., r, c] = v / scale
    out[..., c, r] = v / scale
    return out


# problem data -----------------------------------------------------------


@dataclass(eq=False)
class LMIBatch:
    """Blocks F_j(x) = F0_j + mat(linear part) <= 0; see the module docstring."""

    F0: np.ndarray  # (nb, d, d)
    coef: np.ndarray | None = None  # (nb, sv, nc)
    cols: np.ndarray | None = None  # (nc,), None = all variables
    rowfeat: np.ndarray | None = None  # (nb, sv, w)
    row_cols: np.ndarray | None = None  # (sv, w), all entries distinct
    private: np.ndarray | None = None  # (nb,)
    private_coef: np.ndarray | None = None  # (nb, sv)

    @property
    def nb(self) -> int:
        return self.F0.shape[0]

    @property
    def d(self) -> int:
        return self.F0.shape[1]

    @property
    def sv(self) -> int:
        return self.d * (self.d + 1) // 2

    @classmethod
    def from_matrices(cls, F0, Fi) -> "LMIBatch":
        """One block F0 + sum_i x_i Fi[i] <= 0 from explicit matrices."""
        F0 = np.asarray(F0, dtype=float)
        Fi = np.asarray(Fi, dtype=float)
        return cls(F0[None], svec(Fi).T[None])

    def _cols(self, nx):
        return np.arange(nx) if self.cols is None else self.cols

    def apply(self, x: np.ndarray) -> np.ndarray:
        """svec of the linear part, (nb, sv)."""
        out = np.zeros((self.nb, self.sv))
        if self.coef is not None:
            out += self.coef @ (x if self.cols is None else x[self.cols])
        if self.rowfeat is not None:
            out += np.einsum("jrw,rw->jr", self.rowfeat, x[self.row_cols])
        if self.private is not None:
            out += self.private_coef * x[self.private][:, None]
        return out

    def apply_T(self, v: np.ndarray, nx: int) -> np.ndarray:
        """Adjoint of apply: (nb, sv) -> (nx,)."""
        out = np.zeros(nx)
        if self.coef is not None:
            np.add.at(out, self._cols(nx), np.einsum("jr,jrc->c", v, self.coef))
        if self.rowfeat is not None:
            np.add.at(out, self.row_cols.ravel(), np.einsum("jr,jrw->rw", v, self.rowfeat).ravel())
        if self.private is not None:
            np.add.at(out, self.private, np.einsum("jr,jr->j", v, self.private_coef))
        return out

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.F0 + smat(self.apply(x), self.d)

    def add_schur(self, H: np.ndarray, T: np.ndarray) -> None:
        """H += sum_j C_j' T_j' T_j C_j, with C_j the linear map of block j."""
        nx = H.shape[0]
        cols = self._cols(nx)
        M = np.swapaxes(T, -1, -2) @ T
        MD = None
        if self.coef is not None:
            Y = T @ self.coef
            flat = Y.reshape(-1, Y.shape[-1])
            H[np.ix_(cols, cols)] += flat.T @ flat
            MD = M @ self.coef
        if self.rowfeat is not None:
            Fr = self.rowfeat
            nb, sv, w = Fr.shape
            allc = self.row_cols.ravel()
            for r in range(sv):
                rc = self.row_cols[r]
                tmp = (M[:, r, :, None] * Fr).reshape(nb, sv * w)
                H[np.ix_(rc, allc)] += Fr[:, r, :].T @ tmp
                if MD is not None:
                    cross = Fr[:, r, :].T @ MD[:, r, :]
                    H[np.ix_(rc, cols)] += cross
                    H[np.ix_(cols, rc)] += cross.T
        if self.private is not None:
            Mp = np.einsum("jrs,js->jr", M, self.private_coef)
            if self.coef is not None:
                cross = np.einsum("jrc,jr->jc", self.coef, Mp)
                for j, pj in enumerate(self.private):
                    H[cols, pj] += cross[j]
                    H[pj, cols] += cross[j]
            if self.rowfeat is not None:
                allc = self.row_cols.ravel()
                cross = (self.rowfeat * Mp[:, :, None]).reshape(self.nb, -1)
                for j, pj in enumerate(self.private):
                    H[allc, pj] += cross[j]
                    H[pj, allc] += cross[j]
            np.add.at(H, (self.private, self.private), np.einsum("jr,jr->j", self.private_coef, Mp))


@dataclass(eq=False)
class ConicProblem:
    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: object = None  # dense or scipy.sparse (nl, nx)
    h: np.ndarray | None = None
    lmis: list = field(default_factory=list)

    @property
    def nx(self) -> int:
        return len(self.c)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x)


@dataclass(eq=False)
class ConicSolution:
    x: np.ndarray
    objective: float
    status: str
    eq_residual: float
    lmi_residual: float
    ineq_residual: float
    iterations: int
    gap: float = np.nan


def residuals(problem: ConicProblem, x: np.ndarray) -> tuple:
    """(max |Ax - b|, max lmax(F_j(x)) clipped at 0, max (Gx - h)_+)."""
    eq = 0.0
    if problem.A is not None and len(problem.b):
        eq = float(np.abs(problem.A @ x - problem.b).max())
    lin = 0.0
    if problem.G is not None and problem.G.shape[0]:
        lin = max(0.0, float((problem.G @ x - problem.h).max()))
    lmi = 0.0
    for batch in problem.lmis:
        if batch.nb:
            lmi = max(lmi, float(np.linalg.eigvalsh(batch.values(x))[:, -1].max()))
    return eq, lmi, lin


def _validate(p: ConicProblem) -> None:
    nx = p.nx
    if p.Q.shape != (nx, nx):
        raise ParameterError("Q has wrong shape")
    if p.A is not None and (p.A.shape[1] != nx or p.A.shape[0] != len(p.b)):
        raise ParameterError("equality data has inconsistent shape")
    if p.G is not None and (p.G.shape[1] != nx or p.G.shape[0] != len(p.h)):
        raise ParameterError("inequality data has inconsistent shape")
    for bt in p.lmis:
        nb, d, sv = bt.nb, bt.d, bt.sv
        if bt.F0.ndim != 3 or bt.F0.shape[2] != d:
            raise ParameterError("LMI batch F0 must have shape (nb, d, d)")
        if bt.coef is not None:
            nc = nx if bt.cols is None else len(bt.cols)
            if bt.coef.shape != (nb, sv, nc):
                raise ParameterError("LMI batch coef has inconsistent shape")
        if (bt.rowfeat is None) != (bt.row_cols is None):
            raise ParameterError("rowfeat and row_cols must be given together")
        if bt.rowfeat is not None:
            if bt.rowfeat.shape[:2] != (nb, sv) or bt.row_cols.shape != (sv, bt.rowfeat.shape[2]):
                raise ParameterError("row-block data has inconsistent shape")
            if len(np.unique(bt.row_cols)) != bt.row_cols.size:
                raise ParameterError("row-block columns must be distinct")
        if (bt.private is None) != (bt.private_coef is None):
            raise ParameterError("private and private_coef must be given together")


# cone helpers -----------------------------------------------------------


def _nt_scaling(S: np.ndarray, Z: np.ndarray):
    """R with R' Z R = Lam = R^-1 S R^-T; returns (R, Rinv, lam)."""
    Ls = np.linalg.cholesky(S)
    Lz = np.linalg.cholesky(Z)
    _, lam, Vt = np.linalg.svd(np.swapaxes(Lz, -1, -2) @ Ls)
    V = np.swapaxes(Vt, -1, -2)
    R = Ls @ V / np.sqrt(lam)[:, None, :]
    Rinv = np.sqrt(lam)[:, :, None] * (Vt @ np.linalg.inv(Ls))
    return R, Rinv, lam


def _sandwich(M, X):
    """M X M' batched."""
    return M @ X @ np.swapaxes(M, -1, -2)


def _svec_operator(Rinv: np.ndarray) -> np.ndarray:
    """Matrix of U -> Rinv U Rinv' in svec coordinates, (nb, sv, sv)."""
    basis = _svec_index(Rinv.shape[-1])[3]
    img = np.einsum("jab,rbc,jdc->jrad", Rinv, basis, Rinv)
    return np.swapaxes(svec(img), -1, -2)


def _max_step_psd(lam: np.ndarray, D: np.ndarray) -> float:
    """Largest a with diag(lam) + a D >= 0 (batched)."""
    isq = 1.0 / np.sqrt(lam)
    M = isq[:, :, None] * D * isq[:, None, :]
    mn = np.linalg.eigvalsh(M)[:, 0].min()
    return np.inf if mn >= 0 else -1.0 / mn


def _max_step_lin(lam: np.ndarray, d: np.ndarray) -> float:
    neg = d < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-lam[neg] / d[neg]))


def _shift_into_cone_lin(v):
    mn = v.min() if v.size else 1.0
    return v + (1.0 - mn) if mn < 1e-2 else v.copy()


def _shift_into_cone_psd(M):
    mn = np.linalg.eigvalsh(M)[:, 0]
    shift = np.where(mn < 1e-2, 1.0 - mn, 0.0)
    return M + shift[:, None, None] * np.eye(M.shape[1])


class _KKT:
    """Factorization of [H A'; A 0] via the Schur complement of H."""

    def __init__(self, H, A):
        n = H.shape[0]
        reg = SCHUR_REG * (1.0 + np.abs(np.diag(H)).max())
        self.H = H
        self.cf = sla.cho_factor(H + reg * np.eye(n), lower=True, check_finite=False)
        self.A = A
        if A is not None:
            self.Y = sla.cho_solve(self.cf, A.T, check_finite=False)
            S = A @ self.Y
            self.scf = sla.cho_factor(S + 1e-14 * (1.0 + np.abs(np.diag(S)).max()) * np.eye(len(S)), lower=True)

    def _hsolve(self, r):
        x = sla.cho_solve(self.cf, r, check_finite=False)
        # refine against the unregularized matrix
        for _ in range(REFINE_STEPS):
            x = x + sla.cho_solve(self.cf, r - self.H @ x, check_finite=False)
        return x

    def solve(self, r1, r2):
        if self.A is None:
            return self._hsolve(r1), np.zeros(0)
        hx = self._hsolve(r1)
        dy = sla.cho_solve(self.scf, self.A @ hx - r2)
        return hx - self.Y @ dy, dy


# solver -----------------------------------------------------------------


def solve(problem: ConicProblem, tol: float = 1e-7, max_iters: int = 200) -> ConicSolution:
    """Solve to relative gap, primal and dual residuals below tol.

    Status is "optimal", "infeasible" (a Farkas certificate was found) or
    "max-iterations" (budget exhausted or numerical breakdown; the iterate
    with the smallest residuals is returned).
    """
    if not tol > 0:
        raise ParameterError("tol must be positive")
    _validate(problem)
    p = problem
    nx = p.nx
    Q = np.asarray(p.Q, dtype=float)
    c = np.asarray(p.c, dtype=float)
    A = None if p.A is None or len(p.b) == 0 else np.asarray(p.A, dtype=float)
    b = np.zeros(0) if A is None else np.asarray(p.b, dtype=float)
    G = None if p.G is None or p.G.shape[0] == 0 else sp.csr_matrix(p.G)
    h = np.zeros(0) if G is None else np.asarray(p.h, dtype=float)
    lmis = [bt for bt in p.lmis if bt.nb]
    nl = 0 if G is None else G.shape[0]
    degree = nl + sum(bt.nb * bt.d for bt in lmis)

    def finish(x, status, it, gap=np.nan):
        eq, lmi, lin = residuals(p, x)
        return ConicSolution(x, p.objective(x), status, eq, lmi, lin, it, gap)

    if degree == 0:
        x, _ = _KKT(Q, A).solve(-c, b)
        return finish(x, OPTIMAL, 0, 0.0)

    hs = [-svec(bt.F0) for bt in lmis]

    def GT(zl, zs):
        out = G.T @ zl if G is not None else np.zeros(nx)
        for bt, z in zip(lmis, zs):
            out = out + bt.apply_T(z, nx)
        return out

    # starting point: least-squares fit of the inequalities with unit scaling
    H0 = Q.copy()
    if G is not None:
        H0 += (G.T @ G).toarray()
    for bt in lmis:
        bt.add_schur(H0, np.broadcast_to(np.eye(bt.sv), (bt.nb, bt.sv, bt.sv)))
    x, _ = _KKT(H0, A).solve(-c + GT(h, hs), b)
    sl = _shift_into_cone_lin(h - G @ x) if G is not None else np.zeros(0)
    Ss = [_shift_into_cone_psd(smat(hj - bt.apply(x), bt.d)) for bt, hj in zip(lmis, hs)]
    zl = np.ones(nl)
    Zs = [np.broadcast_to(np.eye(bt.d), (bt.nb, bt.d, bt.d)).copy() for bt in lmis]
    y = np.zeros(len(b))

    scale_c = max(1.0, np.abs(c).max())
    best = (np.inf, x.copy())
    it = 0
    for it in range(1, max_iters + 1):
        zs_vec = [svec(Z) for Z in Zs]
        ss_vec = [svec(S) for S in Ss]
        r_d = Q @ x + c + GT(zl, zs_vec) + (A.T @ y if A is not None else 0.0)
        r_p = A @ x - b if A is not None else np.zeros(0)
        r_cl = (G @ x + sl - h) if G is not None else np.zeros(0)
        r_cs = [bt.apply(x) + s - hj for bt, s, hj in zip(lmis, ss_vec, hs)]
        gap = float(sl @ zl + sum(np.einsum("jr,jr->", s, z) for s, z in zip(ss_vec, zs_vec)))
        mu = gap / degree
        pobj = p.objective(x)
        pres = max(
            np.abs(r_p).max(initial=0.0),
            np.abs(r_cl).max(initial=0.0),
            max((np.abs(r).max() for r in r_cs), default=0.0),
        )
        dres = np.abs(r_d).max() / scale_c
        rgap = gap / max(1.0, abs(pobj))
        merit = max(pres, dres, rgap)
        log.debug("it %3d pobj % .9e pres %.2e dres %.2e gap %.2e", it, pobj, pres, dres, rgap)
        if merit < best[0]:
            best = (merit, x.copy())
        if pres <= tol and dres <= tol and rgap <= tol:
            sol = finish(x, OPTIMAL, it, gap)
            if max(sol.eq_residual, sol.lmi_residual, sol.ineq_residual) <= tol:
                return sol

        # Farkas certificate of primal infeasibility: z in K, A'y + G'z = 0, h'z + b'y < 0
        hz = float(h @ zl + sum(np.einsum("jr,jr->", hj, z) for hj, z in zip(hs, zs_vec)) + b @ y)
        if hz < 0 and pres > tol:
            cert = GT(zl, zs_vec) + (A.T @ y if A is not None else 0.0)
            if np.abs(cert).max() <= 1e-9 * -hz:
                return finish(best[1], INFEASIBLE, it, gap)

        try:
            wl = np.sqrt(sl / zl)
            lam_l = np.sqrt(sl * zl)
            scal = [_nt_scaling(S, Z) for S, Z in zip(Ss, Zs)]
            if not np.all(np.isfinite(lam_l)) or any(not np.all(np.isfinite(sc[2])) for sc in scal):
                break
            Ts = [_svec_operator(Rinv) for _, Rinv, _ in scal]
            H = Q.copy()
            Gt_lin = None
            if G is not None:
                Gt_lin = sp.diags(1.0 / wl) @ G
                H += (Gt_lin.T @ Gt_lin).toarray()
            for bt, T in zip(lmis, Ts):
                bt.add_schur(H, T)
            kkt = _KKT(H, A)
        except (np.linalg.LinAlgError, ValueError):
            break

        def newton(ds_l, ds_s):
            # t solves lam o t = ds; rhat = W^-T(-r_c) - t
            t_l = ds_l / lam_l
            t_s = [2.0 * D / (lam[:, :, None] + lam[:, None, :]) for (_, _, lam), D in zip(scal, ds_s)]
            rh_l = -r_cl / wl - t_l
            rh_s = [-_sandwich(Rinv, smat(r, bt.d)) - t for bt, (_, Rinv, _), r, t in zip(lmis, scal, r_cs, t_s)]
            rhs = -r_d
            if G is not None:
                rhs = rhs + Gt_lin.T @ rh_l
            for bt, T, rh in zip(lmis, Ts, rh_s):
                rhs = rhs + bt.apply_T(np.einsum("jsr,js->jr", T, svec(rh)), nx)
            dx, dy = kkt.solve(rhs, -r_p)
            dzt_l = (Gt_lin @ dx if G is not None else np.zeros(0)) - rh_l
            dst_l = t_l - dzt_l
            dzt_s, dst_s = [], []
            for bt, T, rh, t in zip(lmis, Ts, rh_s, t_s):
                dz = smat(np.einsum("jrs,js->jr", T, bt.apply(dx)), bt.d) - rh
                dzt_s.append(dz)
                dst_s.append(t - dz)
            return dx, dy, dzt_l, dst_l, dzt_s, dst_s

        def max_step(dzt_l, dst_l, dzt_s, dst_s):
            a = min(_max_step_lin(lam_l, dzt_l), _max_step_lin(lam_l, dst_l))
            for (_, _, lam), dz, ds in zip(scal, dzt_s, dst_s):
                a = min(a, _max_step_psd(lam, dz), _max_step_psd(lam, ds))
            return a

        lam_mats = [lam[:, :, None] * np.eye(lam.shape[1]) for (_, _, lam) in scal]
        try:
            # predictor
            aff = newton(-lam_l * lam_l, [-(L @ L) for L in lam_mats])
            a_aff = min(1.0, max_step(*aff[2:]))
            gap_aff = float(np.sum((lam_l + a_aff * aff[3]) * (lam_l + a_aff * aff[2])))
            for L, dz, ds in zip(lam_mats, aff[4], aff[5]):
                gap_aff += float(np.einsum("jab,jab->", L + a_aff * ds, L + a_aff * dz))
            sigma = min(1.0, max(0.0, gap_aff / gap)) ** 3
            # corrector
            ds_l = -lam_l * lam_l - aff[3] * aff[2] + sigma * mu
            ds_s = []
            for L, dz, ds in zip(lam_mats, aff[4], aff[5]):
                prod = 0.5 * (ds @ dz + dz @ ds)
                ds_s.append(-(L @ L) - prod + sigma * mu * np.eye(L.shape[-1]))
            dx, dy, dzt_l, dst_l, dzt_s, dst_s = newton(ds_l, ds_s)
        except (np.linalg.LinAlgError, ValueError):
            break
        alpha = min(1.0, 0.99 * max_step(dzt_l, dst_l, dzt_s, dst_s))
        if not np.isfinite(alpha) or alpha <= 0:
            break

        x = x + alpha * dx
        y = y + alpha * dy
        sl = sl + alpha * wl * dst_l
        zl = zl + alpha * dzt_l / wl
        Ss = [S + alpha * _sandwich(R, ds) for S, (R, _, _), ds in zip(Ss, scal, dst_s)]
        Zs = [Z + alpha * _sandwich(np.swapaxes(Rinv, -1, -2), dz) for Z, (_, Rinv, _), dz in zip(Zs, scal, dzt_s)]
        Ss = [0.5 * (S + np.swapaxes(S, -1, -2)) for S in Ss]
        Zs = [0.5 * (Z + np.swapaxes(Z, -1, -2)) for Z in Zs]

    return finish(best[1], MAX_ITERATIONS, it)


def dump(problem: ConicProblem, path) -> None:
    """Plain-text dump of a problem for debugging.

    Each array is introduced by a line '# name rows cols' followed by its
    rows written with 17 significant digits.  LMI blocks are written as F0
    and the full svec coefficient matrix over all variables.
    """

    def write(fh, name, arr):
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        fh.write(f"# {name} {arr.shape[0]} {arr.shape[1]}\n")
        np.savetxt(fh, arr, fmt="%.17g")

    nx = problem.nx
    with open(path, "w") as fh:
        write(fh, "Q", problem.Q)
        write(fh, "c", problem.c)
        if problem.A is not None:
            write(fh, "A", problem.A)
            write(fh, "b", problem.b)
        if problem.G is not None:
            write(fh, "G", problem.G.toarray() if sp.issparse(problem.G) else problem.G)
            write(fh, "h", problem.h)
        for i, bt in enumerate(problem.lmis):
            full = np.stack([bt.apply(e) for e in np.eye(nx)], axis=-1)
            for j in range(bt.nb):
                write(fh, f"lmi{i}.F0[{j}]", bt.F0[j])
                write(fh, f"lmi{i}.svec_coef[{j}]", full[j])
