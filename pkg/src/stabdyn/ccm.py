"""Contraction LMI blocks and violation measures.

With B_perp = [I_{n-m}; 0] the stability block at x is the leading
(n-m) x (n-m) block of

    -d_f W(x) + J(x) W(x) + W(x) J(x).T + 2 r W(x),

J = df/dx and d_f W = sum_j f_j dW/dx_j.  The violation of a point is

    nu = max(lmax(F_{lam + eps_lam}), lmax((delta_w + eps_w) I - W)).

Tolerances are read from any object with attributes lam, eps_lambda,
delta_wlow and eps_wlow (TrainConfig satisfies this).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError
from .model import LearnedModel


@dataclass(frozen=True, eq=False)
class StabilityBlock:
    F: np.ndarray
    at: np.ndarray
    rate: float


@dataclass(frozen=True)
class Violation:
    nu: float
    stability_part: float
    definiteness_part: float


def stability_blocks(model: LearnedModel, X, rate: float) -> np.ndarray:
    """F at every state of a batch X (..., n) -> (..., n-m, n-m)."""
    X = model._x(X)
    W = model.W(X)
    dW = model.W_partials(X)
    f = model.f(X)
    J = model.jac_f(X)
    JW = J @ W
    inner = -np.einsum("...abj,...j->...ab", dW, f) + JW + np.swapaxes(JW, -1, -2) + 2.0 * rate * W
    k = model.n - model.m
    F = inner[..., :k, :k]
    return 0.5 * (F + np.swapaxes(F, -1, -2))


def assemble_F(model: LearnedModel, x, rate: float) -> StabilityBlock:
    x = model._x(x)
    if x.ndim != 1:
        raise ParameterError("assemble_F takes a single state")
    return StabilityBlock(stability_blocks(model, x, rate), x.copy(), float(rate))


def _lmax(M: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(M)):
        raise NumericError("non-finite matrix passed to the symmetric eigen-solver")
    try:
        return np.linalg.eigvalsh(M)[..., -1]
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigen-solver failed: {exc}") from exc


def violation_parts(model: LearnedModel, X, config) -> tuple:
    """(stability_part, definiteness_part) arrays over a batch of states."""
    X = model._x(X)
    stab = _lmax(stability_blocks(model, X, config.lam + config.eps_lambda))
    W = model.W(X)
    shift = (config.delta_wlow + config.eps_wlow) * np.eye(model.n)
    defin = _lmax(shift - W)
    return stab, defin


def violation(model: LearnedModel, x, config) -> Violation:
    x = model._x(x)
    if x.ndim != 1:
        raise ParameterError("violation takes a single state")
    s, d = violation_parts(model, x, config)
    return Violation(float(max(s, d)), float(s), float(d))


def _points(points) -> np.ndarray:
    return np.asarray(getattr(points, "points", points), dtype=float)


def worst_violation(model: LearnedModel, points, config) -> tuple:
    """(s_bar, nu): max stability eigenvalue over the set and per-point nu."""
    X = _points(points)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("worst_violation needs a non-empty point set")
    stab, defin = violation_parts(model, X, config)
    return float(stab.max()), np.maximum(stab, defin)
