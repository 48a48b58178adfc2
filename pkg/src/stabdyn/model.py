"""Linear-in-parameters control-affine model and dual metric.

    f(x) = Phi_f(x).T alpha
    B(x) = [Phi_b.T beta_1, ..., Phi_b.T beta_m]
    W(x) = c I + sum_{a<=b} w_ab(x) S_ab,   w_ab(x) = phi_ab(x) . theta_ab

S_ab is the symmetric unit matrix with ones at (a, b) and (b, a).  For
pairs inside the leading (n-m) block phi_ab is the restricted map
phi_hat (which ignores the last m coordinates); all other pairs use the
full map phi.  The scalar c multiplies a constant identity feature; it is
seeded to 1 with theta = 0 so that the initial metric is exactly I.

All evaluation methods accept a single state of shape (n,) or a batch
(..., n) and broadcast over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError
from .features import (
    ConstantInputFeatureMap,
    MatrixFeatureMap,
    ScalarFeatureMap,
    make_input_features,
    make_matrix_features,
    make_scalar_features,
)


@dataclass(frozen=True, eq=False)
class DynamicsParams:
    alpha: np.ndarray  # (d_f,)
    betas: np.ndarray  # (m, d_b)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.betas.ravel()])

    @classmethod
    def from_vector(cls, v, d_f: int, m: int) -> "DynamicsParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:d_f].copy(), v[d_f:].reshape(m, -1).copy())


@dataclass(frozen=True, eq=False)
class MetricParams:
    """Metric coefficients.

    theta has one row per upper-triangle pair (row-major order of
    np.triu_indices(n)); rows of pairs inside the leading (n-m) block are
    the phi_hat coefficients.  offset is the identity coefficient c.
    """

    offset: float
    theta: np.ndarray  # (n_pairs, d_w)
    w_lower: float = 1.0
    w_upper: float = 1.0

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.offset], self.theta.ravel()])

    @classmethod
    def from_vector(cls, v, n_pairs: int, w_lower: float = 1.0, w_upper: float = 1.0) -> "MetricParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), v[1:].reshape(n_pairs, -1).copy(), float(w_lower), float(w_upper))


@dataclass(frozen=True)
class PairLayout:
    n: int
    m: int
    rows: np.ndarray = field(init=False)
    cols: np.ndarray = field(init=False)
    hat: np.ndarray = field(init=False)  # bool mask of pairs inside the leading block

    def __post_init__(self):
        r, c = np.triu_indices(self.n)
        k = self.n - self.m
        object.__setattr__(self, "rows", r)
        object.__setattr__(self, "cols", c)
        object.__setattr__(self, "hat", (r < k) & (c < k))

    @property
    def size(self) -> int:
        return len(self.rows)

    def basis(self) -> np.ndarray:
        """Matrices S_ab, shape (n_pairs, n, n)."""
        S = np.zeros((self.size, self.n, self.n))
        idx = np.arange(self.size)
        S[idx, self.rows, self.cols] = 1.0
        S[idx, self.cols, self.rows] = 1.0
        return S

    def scatter(self, vals: np.ndarray) -> np.ndarray:
        """Symmetric matrices from pair values (..., n_pairs) -> (..., n, n)."""
        out = np.zeros(vals.shape[:-1] + (self.n, self.n))
        out[..., self.rows, self.cols] = vals
        out[..., self.cols, self.rows] = vals
        return out


@dataclass(frozen=True, eq=False)
class LearnedModel:
    f_map: MatrixFeatureMap
    b_map: ConstantInputFeatureMap
    w_map: ScalarFeatureMap
    w_hat_map: ScalarFeatureMap
    dynamics: DynamicsParams
    metric: MetricParams
    lam: float

    @property
    def n(self) -> int:
        return self.f_map.n

    @property
    def m(self) -> int:
        return self.b_map.m

    @property
    def layout(self) -> PairLayout:
        return _layout(self.n, self.m)

    def with_dynamics(self, dynamics: DynamicsParams) -> "LearnedModel":
        return replace(self, dynamics=dynamics)

    def with_metric(self, metric: MetricParams) -> "LearnedModel":
        return replace(self, metric=metric)

    def _x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise ParameterError(f"expected state(s) of dimension {self.n}, got shape {x.shape}")
        return x

    # dynamics ---------------------------------------------------------

    @property
    def A(self) -> np.ndarray:
        """alpha viewed as (2s, n)."""
        return self.dynamics.alpha.reshape(-1, self.n)

    def f(self, x) -> np.ndarray:
        return self.f_map.scalar(self._x(x)) @ self.A

    def B(self, x=None) -> np.ndarray:
        return self.b_map.matrix.T @ self.dynamics.betas.T

    def jac_f(self, x) -> np.ndarray:
        """df/dx, shape (..., n, n) with [i, j] = d f_i / d x_j."""
        dz = self.f_map.scalar_grad(self._x(x))
        return np.einsum("...kj,ki->...ij", dz, self.A)

    # metric -----------------------------------------------------------

    def pair_features(self, x) -> np.ndarray:
        """Feature vector of every pair, shape (..., n_pairs, d_w)."""
        x = self._x(x)
        lay = self.layout
        full = self.w_map(x)
        hat = self.w_hat_map(x)
        return np.where(lay.hat[:, None], hat[..., None, :], full[..., None, :])

    def pair_feature_grads(self, x) -> np.ndarray:
        """Gradients of the pair features, shape (..., n_pairs, d_w, n)."""
        x = self._x(x)
        lay = self.layout
        full = self.w_map.grad(x)
        hat = self.w_hat_map.grad(x)
        return np.where(lay.hat[:, None, None], hat[..., None, :, :], full[..., None, :, :])

    def W(self, x) -> np.ndarray:
        vals = np.einsum("...pk,pk->...p", self.pair_features(x), self.metric.theta)
        return self.metric.offset * np.eye(self.n) + self.layout.scatter(vals)

    def W_partials(self, x) -> np.ndarray:
        """dW/dx_j stacked last, shape (..., n, n, n)."""
        g = np.einsum("...pkj,pk->...pj", self.pair_feature_grads(x), self.metric.theta)
        return np.moveaxis(self.layout.scatter(np.moveaxis(g, -1, -2)), -3, -1)

    def W_directional(self, x, v) -> np.ndarray:
        """sum_j v_j dW/dx_j."""
        v = np.asarray(v, dtype=float)
        if v.shape[-1:] != (self.n,):
            raise ParameterError("direction has wrong dimension")
        g = np.einsum("...pkj,pk,...j->...p", self.pair_feature_grads(x), self.metric.theta, v)
        return self.layout.scatter(g)


_LAYOUTS: dict = {}


def _layout(n: int, m: int) -> PairLayout:
    key = (n, m)
    if key not in _LAYOUTS:
        _LAYOUTS[key] = PairLayout(n, m)
    return _LAYOUTS[key]


def initial_metric(n: int, m: int, d_w: int) -> MetricParams:
    """Coefficients giving W(x) = I exactly."""
    return MetricParams(1.0, np.zeros((_layout(n, m).size, d_w)), 1.0, 1.0)


def build_model(
    n: int,
    m: int,
    lam: float = 0.1,
    s_f: int = 48,
    sigma_f: float = 6.0,
    s_w: int = 36,
    sigma_w: float = 15.0,
    d_b: int | None = None,
    seed: int = 0,
) -> LearnedModel:
    """Zero dynamics and identity metric on freshly drawn feature maps.

    The three random maps use seeds seed, seed + 1 and seed + 2.
    """
    f_map = make_matrix_features(n, s_f, sigma_f, seed)
    b_map = make_input_features(n, m, d_b)
    w_map = make_scalar_features(n, s_w, sigma_w, seed + 1)
    w_hat_map = make_scalar_features(n, s_w, sigma_w, seed + 2, active_dims=range(n - m))
    dyn = DynamicsParams(np.zeros(f_map.d), np.zeros((m, b_map.d)))
    return LearnedModel(f_map, b_map, w_map, w_hat_map, dyn, initial_metric(n, m, w_map.d), float(lam))


# functional aliases -----------------------------------------------------


def eval_f(model: LearnedModel, x) -> np.ndarray:
    return model.f(x)


def eval_B(model: LearnedModel, x) -> np.ndarray:
    model._x(x)
    return model.B(x)


def eval_jacobian_f(model: LearnedModel, x) -> np.ndarray:
    return model.jac_f(x)


def eval_W(model: LearnedModel, x) -> np.ndarray:
    return model.W(x)


def eval_W_directional(model: LearnedModel, x, v) -> np.ndarray:
    return model.W_directional(x, v)
