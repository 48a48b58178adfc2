"""Random Fourier feature maps with analytic derivatives.

Scalar layout (used everywhere): for directions w_1..w_s

    z(x) = s**-0.5 * [cos(w_1.x), sin(w_1.x), ..., cos(w_s.x), sin(w_s.x)]

i.e. cos/sin interleaved, one pair per direction.  The matrix map is
Phi(x) = z(x) kron I_n, shape (2 s n, n): row k*n + i holds z_k(x) in
column i and zeros elsewhere.  A coefficient vector alpha of length 2 s n
is therefore read as a (2 s, n) array A with g(x) = Phi(x).T @ alpha = A.T @ z(x).

Directions are drawn from N(0, 2 sigma^-2 I) with numpy's PCG64 generator
so that z(x).z(y) -> exp(-|x - y|^2 / sigma^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

LAYOUT_VERSION = 1
PRNG_NAME = "numpy.random.PCG64"


def _draw_omegas(n_active: int, s: int, sigma: float, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((s, n_active)) * (np.sqrt(2.0) / sigma)


def _trig(omegas: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Interleaved cos/sin features for a batch x of shape (..., n)."""
    arg = x @ omegas.T
    s = omegas.shape[0]
    out = np.empty(arg.shape[:-1] + (2 * s,))
    out[..., 0::2] = np.cos(arg)
    out[..., 1::2] = np.sin(arg)
    return out / np.sqrt(s)


def _trig_grad(omegas: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient of _trig, shape (..., 2s, n)."""
    arg = x @ omegas.T
    s = omegas.shape[0]
    out = np.empty(arg.shape[:-1] + (2 * s, omegas.shape[1]))
    out[..., 0::2, :] = -np.sin(arg)[..., None] * omegas
    out[..., 1::2, :] = np.cos(arg)[..., None] * omegas
    return out / np.sqrt(s)


def _check_state(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (n,):
        raise ParameterError(f"expected state(s) of dimension {n}, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class ScalarFeatureMap:
    """Vector of 2 s_w scalar random features of x.

    Only the coordinates listed in active_dims enter; the omegas have zero
    entries on every other coordinate, so derivatives there vanish exactly.
    """

    n: int
    s: int
    sigma: float
    seed: int
    active_dims: tuple
    omegas: np.ndarray  # (s, n), zero columns outside active_dims

    @property
    def d(self) -> int:
        return 2 * self.s

    def __call__(self, x) -> np.ndarray:
        x = _check_state(x, self.n)
        return _trig(self.omegas, x)

    def grad(self, x) -> np.ndarray:
        """Gradient, shape (..., d, n)."""
        x = _check_state(x, self.n)
        return _trig_grad(self.omegas, x)


@dataclass(frozen=True, eq=False)
class MatrixFeatureMap:
    """Separable matrix-valued random feature map Phi(x) = z(x) kron I_n."""

    n: int
    s: int
    sigma: float
    seed: int
    omegas: np.ndarray  # (s, n)

    @property
    def d(self) -> int:
        return 2 * self.s * self.n

    def scalar(self, x) -> np.ndarray:
        """The scalar factor z(x), shape (..., 2s)."""
        return _trig(self.omegas, _check_state(x, self.n))

    def scalar_grad(self, x) -> np.ndarray:
        """Gradient of z, shape (..., 2s, n)."""
        return _trig_grad(self.omegas, _check_state(x, self.n))

    def matrix(self, x) -> np.ndarray:
        z = self.scalar(x)
        if z.ndim != 1:
            raise ParameterError("matrix() takes a single state")
        return np.kron(z[:, None], np.eye(self.n))


@dataclass(frozen=True, eq=False)
class ConstantInputFeatureMap:
    """Constant d_b x n matrix whose first n - m columns are zero.

    The last m columns hold a d_b x m matrix with orthonormal columns, so
    b_j = Phi_b.T @ beta_j only has entries in the last m coordinates.
    """

    n: int
    m: int
    matrix: np.ndarray  # (d_b, n)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]


def make_matrix_features(n: int, s: int, sigma: float, seed: int) -> MatrixFeatureMap:
    if n < 1 or s < 1:
        raise ParameterError("n and s must be positive")
    if not sigma > 0:
        raise ParameterError("bandwidth sigma must be positive")
    return MatrixFeatureMap(n, s, float(sigma), int(seed), _draw_omegas(n, s, sigma, seed))


def make_scalar_features(n: int, s: int, sigma: float, seed: int, active_dims=None) -> ScalarFeatureMap:
    if n < 1 or s < 1:
        raise ParameterError("n and s must be positive")
    if not sigma > 0:
        raise ParameterError("bandwidth sigma must be positive")
    active = tuple(range(n)) if active_dims is None else tuple(int(i) for i in active_dims)
    if not active or len(set(active)) != len(active) or min(active) < 0 or max(active) >= n:
        raise ParameterError(f"invalid active_dims {active_dims!r} for n={n}")
    omegas = np.zeros((s, n))
    omegas[:, list(active)] = _draw_omegas(len(active), s, sigma, seed)
    return ScalarFeatureMap(n, s, float(sigma), int(seed), active, omegas)


def make_input_features(n: int, m: int, d_b: int | None = None) -> ConstantInputFeatureMap:
    if not 1 <= m < n:
        raise ParameterError("need 1 <= m < n")
    d_b = m if d_b is None else int(d_b)
    if d_b < m:
        raise ParameterError("d_b must be at least m")
    mat = np.zeros((d_b, n))
    mat[:m, n - m:] = np.eye(m)
    return ConstantInputFeatureMap(n, m, mat)


def eval_features(fmap: MatrixFeatureMap, x) -> np.ndarray:
    """Phi(x), shape (d, n)."""
    return fmap.matrix(x)


def eval_feature_derivative(fmap: MatrixFeatureMap, x, j: int) -> np.ndarray:
    """Partial derivative of Phi with respect to x[j] (0-based), shape (d, n)."""
    if not 0 <= j < fmap.n:
        raise ParameterError(f"coordinate index {j} out of range for n={fmap.n}")
    dz = fmap.scalar_grad(x)
    if dz.ndim != 2:
        raise ParameterError("takes a single state")
    return np.kron(dz[:, j][:, None], np.eye(fmap.n))


def eval_scalar_features(fmap: ScalarFeatureMap, x) -> np.ndarray:
    return fmap(x)


def eval_scalar_feature_derivative(fmap: ScalarFeatureMap, x, j: int) -> np.ndarray:
    """Partial derivative of the scalar features with respect to x[j] (0-based)."""
    if not 0 <= j < fmap.n:
        raise ParameterError(f"coordinate index {j} out of range for n={fmap.n}")
    return fmap.grad(x)[..., j]
