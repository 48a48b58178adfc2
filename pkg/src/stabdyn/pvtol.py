"""Planar quadrotor (PVTOL) ground truth, integration and data generation.

State x = (p_x, p_z, phi, v_x, v_z, phi_dot) with body-frame velocities,
input u = (u_1, u_2) rotor thrusts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import NumericError, ParameterError

N_STATE = 6
N_INPUT = 2


@dataclass(frozen=True)
class PvtolParams:
    m: float = 0.486
    l: float = 0.25
    J: float = 0.00383
    g: float = 9.81

    def __post_init__(self):
        if min(self.m, self.l, self.J, self.g) <= 0:
            raise ParameterError("PVTOL parameters must be strictly positive")

    @property
    def hover_input(self) -> np.ndarray:
        return np.full(2, 0.5 * self.m * self.g)


def pvtol_f(params: PvtolParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _, _, phi, vx, vz, w = np.moveaxis(x, -1, 0)
    c, s = np.cos(phi), np.sin(phi)
    return np.stack(
        [
            vx * c - vz * s,
            vx * s + vz * c,
            w,
            vz * w - params.g * s,
            -vx * w - params.g * c,
            np.zeros_like(phi),
        ],
        axis=-1,
    )


def pvtol_B(params: PvtolParams) -> np.ndarray:
    B = np.zeros((N_STATE, N_INPUT))
    B[4] = 1.0 / params.m
    B[5] = [params.l / params.J, -params.l / params.J]
    return B


def pvtol_jac_f(params: PvtolParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _, _, phi, vx, vz, w = np.moveaxis(x, -1, 0)
    c, s = np.cos(phi), np.sin(phi)
    J = np.zeros(x.shape[:-1] + (N_STATE, N_STATE))
    J[..., 0, 2] = -vx * s - vz * c
    J[..., 0, 3] = c
    J[..., 0, 4] = -s
    J[..., 1, 2] = vx * c - vz * s
    J[..., 1, 3] = s
    J[..., 1, 4] = c
    J[..., 2, 5] = 1.0
    J[..., 3, 2] = -params.g * c
    J[..., 3, 4] = w
    J[..., 3, 5] = vz
    J[..., 4, 2] = params.g * s
    J[..., 4, 3] = -w
    J[..., 4, 5] = -vx
    return J


def pvtol_derivative(params: PvtolParams, x, u) -> np.ndarray:
    return pvtol_f(params, x) + np.asarray(u, dtype=float) @ pvtol_B(params).T


@dataclass(frozen=True)
class PvtolDynamics:
    """True dynamics behind the same interface as a learned model."""

    params: PvtolParams = field(default_factory=PvtolParams)
    n: int = N_STATE
    m: int = N_INPUT

    def f(self, x):
        return pvtol_f(self.params, x)

    def B(self, x=None):
        return pvtol_B(self.params)

    def jac_f(self, x):
        return pvtol_jac_f(self.params, x)

    def derivative(self, x, u):
        return pvtol_derivative(self.params, x, u)


def rk4_step(deriv, x, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of x' = deriv(x, u) with u held constant."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * dt * k1, u)
    k3 = deriv(x + 0.5 * dt * k2, u)
    k4 = deriv(x + dt * k3, u)
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite state during integration")
    return out


# data containers ----------------------------------------------------------


@dataclass(frozen=True)
class DemoTuple:
    x: np.ndarray
    u: np.ndarray
    xdot: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray  # (N, n)
    U: np.ndarray  # (N, m)
    Xdot: np.ndarray  # (N, n)

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i) -> DemoTuple:
        return DemoTuple(self.X[i], self.U[i], self.Xdot[i])


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    points: np.ndarray  # (Nc, n)
    tags: tuple  # "demo" or "random" per point

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class StateBox:
    lower: tuple = (-12.0, -12.0, -np.pi / 3, -4.0, -4.0, -2.0)
    upper: tuple = (12.0, 12.0, np.pi / 3, 4.0, 4.0, 2.0)

    def contains(self, X) -> np.ndarray:
        X = np.asarray(X)
        return np.all((X >= np.array(self.lower)) & (X <= np.array(self.upper)), axis=-1)


@dataclass(frozen=True)
class DemoScenario:
    """Knobs of the waypoint / quintic / PD demonstrator."""

    n_rollouts: int = 12
    n_waypoints: int = 4
    start_radius: tuple = (4.0, 12.0)  # first waypoint lies in this annulus
    goal_spread: float = 1.0  # last waypoint within this box around the origin
    waypoint_spread: float = 1.5  # perturbation of the interior waypoints
    speed: float = 1.5  # nominal reference speed (m/s)
    duration_jitter: float = 0.2  # relative perturbation of segment durations
    kp: float = 1.2  # position gain (deliberately soft)
    kd: float = 1.0  # velocity gain
    k_att: float = 25.0  # attitude gain
    k_rate: float = 5.0  # roll-rate gain
    tilt_limit: float = np.pi / 4
    initial_velocity: float = 1.0  # bound on the initial body velocity
    initial_tilt: float = 0.3  # bound on the initial roll angle
    dt_sim: float = 0.01
    max_retries: int = 200
    box: StateBox = field(default_factory=StateBox)


# demonstrator -------------------------------------------------------------


def _quintic(p0, v0, a0, p1, v1, a1, T):
    """Coefficients (6, dim) of a quintic with given end conditions on [0, T]."""
    M = np.array(
        [
            [1, 0, 0, 0, 0, 0],
            [0, 1, 0, 0, 0, 0],
            [0, 0, 2, 0, 0, 0],
            [1, T, T**2, T**3, T**4, T**5],
            [0, 1, 2 * T, 3 * T**2, 4 * T**3, 5 * T**4],
            [0, 0, 2, 6 * T, 12 * T**2, 20 * T**3],
        ]
    )
    return np.linalg.solve(M, np.array([p0, v0, a0, p1, v1, a1]))


class _Reference:
    """Piecewise quintic through waypoints, C2 with zero acceleration at knots."""

    def __init__(self, waypoints: np.ndarray, durations: np.ndarray):
        self.knots = np.concatenate([[0.0], np.cumsum(durations)])
        seg_vel = np.diff(waypoints, axis=0) / durations[:, None]
        vel = np.zeros_like(waypoints)
        vel[1:-1] = 0.5 * (seg_vel[:-1] + seg_vel[1:])
        zero = np.zeros(waypoints.shape[1])
        self.coefs = [
            _quintic(waypoints[i], vel[i], zero, waypoints[i + 1], vel[i + 1], zero, durations[i])
            for i in range(len(durations))
        ]

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    def __call__(self, t: float):
        i = int(np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.coefs) - 1))
        tau = min(t - self.knots[i], self.knots[i + 1] - self.knots[i])
        c = self.coefs[i]
        p = sum(c[k] * tau**k for k in range(6))
        v = sum(k * c[k] * tau ** (k - 1) for k in range(1, 6))
        a = sum(k * (k - 1) * c[k] * tau ** (k - 2) for k in range(2, 6))
        return p, v, a


def _pd_input(params: PvtolParams, sc: DemoScenario, x, ref) -> np.ndarray:
    p_ref, v_ref, a_ref = ref
    phi, w = x[2], x[5]
    c, s = np.cos(phi), np.sin(phi)
    v_in = np.array([x[3] * c - x[4] * s, x[3] * s + x[4] * c])
    a = a_ref + sc.kp * (p_ref - x[:2]) + sc.kd * (v_ref - v_in)
    thrust_dir = np.array([a[0], a[1] + params.g])
    phi_des = np.clip(np.arctan2(-thrust_dir[0], max(thrust_dir[1], 1e-3)), -sc.tilt_limit, sc.tilt_limit)
    thrust = params.m * np.linalg.norm(thrust_dir)
    phi_acc = sc.k_att * (phi_des - phi) - sc.k_rate * w
    diff = params.J * phi_acc / params.l
    u = 0.5 * np.array([thrust + diff, thrust - diff])
    return np.clip(u, 0.02 * params.m * params.g, 3.0 * params.m * params.g)


def _sample_waypoints(rng, sc: DemoScenario) -> np.ndarray:
    r = rng.uniform(*sc.start_radius)
    ang = rng.uniform(0, 2 * np.pi)
    start = r * np.array([np.cos(ang), np.sin(ang)])
    goal = rng.uniform(-sc.goal_spread, sc.goal_spread, 2)
    frac = np.linspace(0, 1, sc.n_waypoints)[:, None]
    wps = start + frac * (goal - start)
    wps[1:-1] += rng.normal(0, sc.waypoint_spread, (sc.n_waypoints - 2, 2))
    return wps


def _rollout(params: PvtolParams, sc: DemoScenario, rng, dt_sample: float):
    wps = _sample_waypoints(rng, sc)
    lens = np.linalg.norm(np.diff(wps, axis=0), axis=1)
    durations = np.maximum(lens / sc.speed, 1.0) * (1 + rng.uniform(-sc.duration_jitter, sc.duration_jitter, len(lens)))
    ref = _Reference(wps, durations)
    x = np.zeros(N_STATE)
    x[:2] = wps[0]
    x[2] = rng.uniform(-sc.initial_tilt, sc.initial_tilt)
    x[3:5] = rng.uniform(-sc.initial_velocity, sc.initial_velocity, 2)
    T_total = ref.duration + 2.0
    n_steps = int(round(T_total / sc.dt_sim))
    every = int(round(dt_sample / sc.dt_sim))
    deriv = lambda xx, uu: pvtol_derivative(params, xx, uu)  # noqa: E731
    xs, us = [], []
    for k in range(n_steps):
        u = _pd_input(params, sc, x, ref(k * sc.dt_sim))
        if k % every == 0:
            xs.append(x.copy())
            us.append(u)
        x = rk4_step(deriv, x, u, sc.dt_sim)
        if not sc.box.contains(x):
            return None
    X, U = np.array(xs), np.array(us)
    return X, U


def generate_demonstrations(
    params: PvtolParams, seed: int, N: int, dt_sample: float = 0.1, scenario: DemoScenario | None = None
):
    """N tuples (x, u, xdot) drawn uniformly from a pool of PD-tracked rollouts.

    Returns (Dataset, list of raw (X, U) trajectories).
    """
    if N < 1:
        raise ParameterError("N must be at least 1")
    sc = scenario or DemoScenario()
    if not dt_sample >= sc.dt_sim:
        raise ParameterError("dt_sample must not be shorter than the simulation step")
    rng = np.random.Generator(np.random.PCG64(seed))
    trajs = []
    retries = 0
    while len(trajs) < sc.n_rollouts or sum(len(t[0]) for t in trajs) < N:
        out = _rollout(params, sc, rng, dt_sample)
        if out is None:
            retries += 1
            if retries > sc.max_retries:
                raise NumericError("demonstrator keeps leaving the state box; relax the scenario")
            continue
        trajs.append(out)
    X = np.concatenate([t[0] for t in trajs])
    U = np.concatenate([t[1] for t in trajs])
    pick = np.sort(rng.choice(len(X), size=N, replace=False))
    X, U = X[pick], U[pick]
    return Dataset(X, U, pvtol_derivative(params, X, U)), trajs


def sample_constraint_points(dataset: Dataset, extra: int, box: StateBox | None = None, seed: int = 0) -> ConstraintSet:
    """Demo states plus `extra` scrambled Halton points in the box."""
    if extra < 0:
        raise ParameterError("extra must be non-negative")
    box = box or StateBox()
    lo, hi = np.array(box.lower, dtype=float), np.array(box.upper, dtype=float)
    if lo.shape != (N_STATE,) or hi.shape != lo.shape or np.any(hi <= lo):
        raise ParameterError("degenerate state box")
    pts = [np.asarray(dataset.X, dtype=float)]
    tags = ["demo"] * len(dataset)
    if extra:
        h = qmc.Halton(d=len(lo), scramble=True, seed=np.random.Generator(np.random.PCG64(seed)))
        pts.append(qmc.scale(h.random(extra), lo, hi))
        tags += ["random"] * extra
    return ConstraintSet(np.concatenate(pts), tuple(tags))


# CSV files ------------------------------------------------------------------

DATASET_COLUMNS = tuple(f"x{i}" for i in range(1, 7)) + ("u1", "u2") + tuple(f"xdot{i}" for i in range(1, 7))
CONSTRAINT_COLUMNS = tuple(f"x{i}" for i in range(1, 7)) + ("tag",)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_comment_header(fh, lines) -> None:
    for line in lines:
        fh.write(f"# {line}\n" if line else "#\n")


def _data_lines(path):
    with open(path) as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]


def write_dataset_csv(path, dataset: Dataset, header=()) -> None:
    """One row per tuple: x1..x6, u1, u2, xdot1..xdot6 at 17 significant digits."""
    rows = np.hstack([dataset.X, dataset.U, dataset.Xdot])
    with open(path, "w", newline="\n") as fh:
        write_comment_header(fh, header)
        fh.write(",".join(DATASET_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")


def read_dataset_csv(path) -> Dataset:
    lines = _data_lines(path)
    if not lines or tuple(lines[0].split(",")) != DATASET_COLUMNS:
        raise ParameterError(f"{path}: not a dataset file (bad header)")
    try:
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=float).reshape(-1, 14)
    except ValueError as exc:
        raise ParameterError(f"{path}: malformed row ({exc})") from exc
    return Dataset(rows[:, :6].copy(), rows[:, 6:8].copy(), rows[:, 8:].copy())


def write_constraints_csv(path, cset: ConstraintSet, header=()) -> None:
    """x1..x6 plus the provenance tag ("demo" or "random")."""
    with open(path, "w", newline="\n") as fh:
        write_comment_header(fh, header)
        fh.write(",".join(CONSTRAINT_COLUMNS) + "\n")
        for p, tag in zip(cset.points, cset.tags):
            fh.write(",".join(_fmt(v) for v in p) + f",{tag}\n")


def read_constraints_csv(path) -> ConstraintSet:
    lines = _data_lines(path)
    if not lines or tuple(lines[0].split(",")) != CONSTRAINT_COLUMNS:
        raise ParameterError(f"{path}: not a constraint-set file (bad header)")
    pts, tags = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 7:
            raise ParameterError(f"{path}: malformed row {ln!r}")
        try:
            pts.append([float(v) for v in parts[:6]])
        except ValueError as exc:
            raise ParameterError(f"{path}: malformed row ({exc})") from exc
        tags.append(parts[6])
    return ConstraintSet(np.array(pts, dtype=float).reshape(-1, 6), tuple(tags))
