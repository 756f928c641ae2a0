"""Dynamics models, constraint/output wrappers and derivative helpers.

Models are plain containers around an evaluation function written in terms of
the :mod:`unimpc.autodiff` math helpers.  The evaluation function receives the
state and input as *sequences of scalar components* (floats, numpy arrays, or
dual numbers), which keeps every model simultaneously usable for plain
simulation, batched evaluation and forward-mode differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


class DimensionError(ValueError):
    """An argument's shape does not match the declared model dimensions."""


class NumericFailure(RuntimeError):
    """A numeric evaluation produced non-finite values."""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in context.items())})"
        super().__init__(message)


@dataclass(frozen=True)
class DynamicsModel:
    """Vector field (``continuous=True``) or one-step map over (x, u)."""

    name: str
    n_x: int
    n_u: int
    continuous: bool
    eval_fn: Callable[[Sequence, Sequence], Sequence]


@dataclass(frozen=True)
class OutputMap:
    """Differentiable output ``y = c(x)`` feeding a tracking cost."""

    n_y: int
    eval_fn: Callable[[Sequence], Sequence]


@dataclass(frozen=True)
class ConstraintSet:
    """Stage inequalities ``h(x, u) <= 0`` and terminal ``h_N(x) <= 0``."""

    n_h: int
    stage_fn: Callable[[Sequence, Sequence], Sequence]
    n_hN: int
    terminal_fn: Callable[[Sequence], Sequence]


# ---------------------------------------------------------------------------
# evaluation & discretization


def _comps(arr) -> list:
    return [np.asarray(arr)[..., j] for j in range(np.asarray(arr).shape[-1])]


def _check_vec(name: str, v, n: int):
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise DimensionError(f"{name} must have shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericFailure(f"{name} contains non-finite entries")
    return v


def eval_dynamics(model: DynamicsModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Evaluate ``f(x, u)`` for a single state/input pair."""
    x = _check_vec("x", x, model.n_x)
    u = _check_vec("u", u, model.n_u)
    out = np.array([ad.value(c) for c in model.eval_fn(list(x), list(u))], dtype=float)
    if out.shape != (model.n_x,):
        raise DimensionError(f"model '{model.name}' returned {out.shape}, expected ({model.n_x},)")
    if not np.all(np.isfinite(out)):
        raise NumericFailure("dynamics evaluation produced non-finite values", model=model.name)
    return out


def _rk4_comps(f: Callable, xc: Sequence, uc: Sequence, h: float) -> list:
    k1 = f(xc, uc)
    k2 = f([x + (h / 2.0) * k for x, k in zip(xc, k1)], uc)
    k3 = f([x + (h / 2.0) * k for x, k in zip(xc, k2)], uc)
    k4 = f([x + h * k for x, k in zip(xc, k3)], uc)
    return [x + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d) for x, a, b, c, d in zip(xc, k1, k2, k3, k4)]


def rk4_step(model: DynamicsModel, x: np.ndarray, u: np.ndarray, ts: float) -> np.ndarray:
    """One classical Runge-Kutta step of a continuous-time model."""
    if not model.continuous:
        raise DimensionError("rk4_step expects a continuous-time model")
    if not ts > 0.0:
        raise DimensionError(f"ts must be positive, got {ts}")
    x = _check_vec("x", x, model.n_x)
    u = _check_vec("u", u, model.n_u)
    out = _rk4_comps(model.eval_fn, list(x), list(u), ts)
    out = np.array([ad.value(c) for c in out], dtype=float)
    if not np.all(np.isfinite(out)):
        raise NumericFailure("rk4 step produced non-finite values", model=model.name, ts=ts)
    return out


def discretize_rk4(model: DynamicsModel, ts: float, substeps: int = 1) -> DynamicsModel:
    """Zero-order-hold RK4 discretization as a new (discrete) model."""
    if not model.continuous:
        raise DimensionError("discretize_rk4 expects a continuous-time model")
    if not ts > 0.0 or substeps < 1:
        raise DimensionError(f"invalid discretization: ts={ts}, substeps={substeps}")
    h = ts / substeps

    def step(xc, uc):
        for _ in range(substeps):
            xc = _rk4_comps(model.eval_fn, xc, uc, h)
        return xc

    return DynamicsModel(f"{model.name}[rk4 ts={ts:g}]", model.n_x, model.n_u, False, step)


def with_ignored_inputs(model: DynamicsModel, extra: int) -> DynamicsModel:
    """Extend the input vector by ``extra`` entries the dynamics never read.

    Used to carry per-stage slack variables through the standard stage
    structure: the corresponding input-Jacobian columns are exactly zero.
    """
    if extra < 0:
        raise DimensionError("extra must be non-negative")

    def fn(xc, uc):
        return model.eval_fn(xc, uc[: model.n_u])

    return DynamicsModel(model.name, model.n_x, model.n_u + extra, model.continuous, fn)


# ---------------------------------------------------------------------------
# derivatives


def fn_jacobians(fn: Callable, xc: Sequence, uc: Sequence, batch_shape: tuple = ()):
    """Jacobians of ``fn(x, u)`` w.r.t. x and u, batched over leading axes."""
    n_x, n_u = len(xc), len(uc)
    nd = n_x + n_u
    xd = ad.seed(xc, 0, nd)
    ud = ad.seed(uc, n_x, nd)
    out = fn(xd, ud)
    J = ad.jacobian(out, nd, batch_shape)
    return J[..., :n_x], J[..., n_x:]


def jacobians(model: DynamicsModel, x: np.ndarray, u: np.ndarray):
    """Exact ``A = df/dx``, ``B = df/du`` at a point, via forward-mode AD."""
    x = _check_vec("x", x, model.n_x)
    u = _check_vec("u", u, model.n_u)
    A, B = fn_jacobians(model.eval_fn, list(x), list(u))
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericFailure("jacobian evaluation produced non-finite values", model=model.name)
    return A, B


def hessian_lagrangian_stage(
    model: DynamicsModel,
    constraints: ConstraintSet | None,
    x: np.ndarray,
    u: np.ndarray,
    dyn_mult: np.ndarray,
    ineq_mult: np.ndarray | None,
    Q: np.ndarray,
    R: np.ndarray,
) -> np.ndarray:
    """Exact Hessian of the stage Lagrangian over ``(x, u)``.

    The stage term is ``(x'Qx + u'Ru)/2 + dyn_mult'f(x,u) + ineq_mult'h(x,u)``;
    the one-half scaling on the quadratic cost matches the convention used by
    the stage QPs, so with zero multipliers the result is ``diag(Q, R)``.
    ``dyn_mult`` is the multiplier attached to this stage's dynamics
    constraint.  The pinned initial state contributes an affine term only, so
    the first stage uses the same formula as every interior stage.
    """
    x = _check_vec("x", x, model.n_x)
    u = _check_vec("u", u, model.n_u)
    dyn_mult = _check_vec("dyn_mult", dyn_mult, model.n_x)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n = model.n_x

    def lag(w):
        xc, uc = w[:n], w[n:]
        acc = 0.0
        for i in range(n):
            for j in range(n):
                if Q[i, j] != 0.0:
                    acc = acc + 0.5 * Q[i, j] * xc[i] * xc[j]
        for i in range(model.n_u):
            for j in range(model.n_u):
                if R[i, j] != 0.0:
                    acc = acc + 0.5 * R[i, j] * uc[i] * uc[j]
        for th, fk in zip(dyn_mult, model.eval_fn(xc, uc)):
            if th != 0.0:
                acc = acc + th * fk
        if constraints is not None and constraints.n_h > 0 and ineq_mult is not None:
            for mu, hk in zip(ineq_mult, constraints.stage_fn(xc, uc)):
                if mu != 0.0:
                    acc = acc + mu * hk
        return acc

    H = ad.hessian(lag, list(x) + list(u))
    if not np.all(np.isfinite(H)):
        raise NumericFailure("stage Hessian produced non-finite values", model=model.name)
    return H


def hessian_lagrangian_terminal(
    constraints: ConstraintSet | None,
    x: np.ndarray,
    W: np.ndarray,
    ineq_mult_N: np.ndarray | None,
) -> np.ndarray:
    """Exact Hessian of ``x'Wx/2 + ineq_mult_N'h_N(x)`` at the terminal stage."""
    W = np.asarray(W, dtype=float)
    n = len(x)

    def lag(xc):
        acc = 0.0
        for i in range(n):
            for j in range(n):
                if W[i, j] != 0.0:
                    acc = acc + 0.5 * W[i, j] * xc[i] * xc[j]
        if constraints is not None and constraints.n_hN > 0 and ineq_mult_N is not None:
            for mu, hk in zip(ineq_mult_N, constraints.terminal_fn(xc)):
                if mu != 0.0:
                    acc = acc + mu * hk
        return acc

    return ad.hessian(lag, list(np.asarray(x, dtype=float)))


def rollout(model: DynamicsModel, x0: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Simulate a discrete model forward under an input sequence."""
    if model.continuous:
        raise DimensionError("rollout expects a discrete-time model")
    U = np.asarray(U, dtype=float)
    X = np.empty((U.shape[0] + 1, model.n_x))
    X[0] = _check_vec("x0", x0, model.n_x)
    for i in range(U.shape[0]):
        X[i + 1] = eval_dynamics(model, X[i], U[i])
    return X


# ---------------------------------------------------------------------------
# constraint builders


def box_constraints(
    x_lb: np.ndarray,
    x_ub: np.ndarray,
    u_lb: np.ndarray,
    u_ub: np.ndarray,
    extra_stage: tuple[int, Callable] | None = None,
    extra_terminal: tuple[int, Callable] | None = None,
) -> ConstraintSet:
    """Box bounds expressed as affine rows of ``h(x, u) <= 0``.

    Row order: state uppers, state lowers, input uppers, input lowers
    (infinite bounds are skipped), then any extra rows given as
    ``(n_rows, fn)``.  The terminal set is the state box restricted to states
    plus the extra terminal rows.
    """
    x_lb = np.asarray(x_lb, dtype=float)
    x_ub = np.asarray(x_ub, dtype=float)
    u_lb = np.asarray(u_lb, dtype=float)
    u_ub = np.asarray(u_ub, dtype=float)
    if np.any(x_lb > x_ub) or np.any(u_lb > u_ub):
        raise DimensionError("box bounds must satisfy lb <= ub")

    xu_idx = [j for j in range(len(x_ub)) if np.isfinite(x_ub[j])]
    xl_idx = [j for j in range(len(x_lb)) if np.isfinite(x_lb[j])]
    uu_idx = [j for j in range(len(u_ub)) if np.isfinite(u_ub[j])]
    ul_idx = [j for j in range(len(u_lb)) if np.isfinite(u_lb[j])]

    def stage_fn(xc, uc):
        rows = [xc[j] - x_ub[j] for j in xu_idx]
        rows += [x_lb[j] - xc[j] for j in xl_idx]
        rows += [uc[j] - u_ub[j] for j in uu_idx]
        rows += [u_lb[j] - uc[j] for j in ul_idx]
        if extra_stage is not None:
            rows.extend(extra_stage[1](xc, uc))
        return rows

    def terminal_fn(xc):
        rows = [xc[j] - x_ub[j] for j in xu_idx]
        rows += [x_lb[j] - xc[j] for j in xl_idx]
        if extra_terminal is not None:
            rows.extend(extra_terminal[1](xc))
        return rows

    n_h = len(xu_idx) + len(xl_idx) + len(uu_idx) + len(ul_idx)
    n_hN = len(xu_idx) + len(xl_idx)
    if extra_stage is not None:
        n_h += extra_stage[0]
    if extra_terminal is not None:
        n_hN += extra_terminal[0]
    return ConstraintSet(n_h, stage_fn, n_hN, terminal_fn)


# ---------------------------------------------------------------------------
# benchmark models


@dataclass(frozen=True)
class CartPendulumParams:
    cart_mass: float = 1.0
    pendulum_mass: float = 0.1
    pole_length: float = 0.5
    gravity: float = 9.81


def cart_pendulum(params: CartPendulumParams = CartPendulumParams()) -> DynamicsModel:
    """Cart with a point-mass pendulum; angle measured from upright.

    State ``[p, p_dot, phi, phi_dot]``, input ``[force]``.  The upright
    origin is an equilibrium of the vector field.
    """
    mc, mp, length, g = params.cart_mass, params.pendulum_mass, params.pole_length, params.gravity

    def fn(xc, uc):
        _, p_dot, phi, phi_dot = xc
        (force,) = uc
        s, c = ad.sin(phi), ad.cos(phi)
        p_dd = (force + mp * s * (length * phi_dot * phi_dot - g * c)) / (mc + mp * s * s)
        phi_dd = (g * s - p_dd * c) / length
        return [p_dot, p_dd, phi_dot, phi_dd]

    return DynamicsModel("cart_pendulum", 4, 1, True, fn)


@dataclass(frozen=True)
class SingleTrackParams:
    """Small-scale single-track car with simplified Pacejka tire forces.

    Defaults describe a palm-sized (roughly 1/28-scale, ~0.2 kg) car; peak
    axle forces are of the order of the car's weight.
    """

    mass: float = 0.181
    yaw_inertia: float = 3.0e-4
    lf: float = 0.029
    lr: float = 0.033
    Bf: float = 5.5
    Cf: float = 1.5
    Df: float = 0.9
    Br: float = 7.0
    Cr: float = 1.45
    Dr: float = 1.0
    c1: float = 0.4
    c2: float = -0.05
    c3: float = -0.02
    c4: float = -0.008


def single_track(params: SingleTrackParams = SingleTrackParams()) -> DynamicsModel:
    """Single-track (bicycle) model with drivetrain/steering/progress integrators.

    State ``[px, py, psi, vx, vy, omega, T, delta, theta]``; the last three
    are pure integrators of the input ``[T_rate, delta_rate, theta_rate]``.
    ``theta`` is the path-progress coordinate used by contouring control.
    Valid for forward speeds bounded away from zero (slip angles divide by
    ``vx``).
    """
    p = params

    def fn(xc, uc):
        _, _, psi, vx, vy, omega, torque, delta, _ = xc
        t_rate, d_rate, th_rate = uc
        s_psi, c_psi = ad.sin(psi), ad.cos(psi)
        s_del, c_del = ad.sin(delta), ad.cos(delta)
        alpha_f = delta - ad.arctan((vy + omega * p.lf) / vx)
        alpha_r = -ad.arctan((vy - omega * p.lr) / vx)
        F_f = p.Df * ad.sin(p.Cf * ad.arctan(p.Bf * alpha_f))
        F_r = p.Dr * ad.sin(p.Cr * ad.arctan(p.Br * alpha_r))
        F_x = (p.c1 + p.c2 * vx) * torque + p.c3 * vx * vx + p.c4
        return [
            vx * c_psi - vy * s_psi,
            vx * s_psi + vy * c_psi,
            omega,
            (F_x - F_f * s_del + p.mass * vy * omega) / p.mass,
            (F_r + F_f * c_del - p.mass * vx * omega) / p.mass,
            (F_f * p.lf * c_del - F_r * p.lr) / p.yaw_inertia,
            t_rate,
            d_rate,
            th_rate,
        ]

    return DynamicsModel("single_track", 9, 3, True, fn)
