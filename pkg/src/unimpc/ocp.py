"""Optimal control problem container and QP assembly.

The stage QP is the quadratic model

    min  sum_i  z_i' M_i z_i / 2 + q_i' z_i   +  dx_N' M_N dx_N / 2 + q_N' dx_N
    s.t. dx_{i+1} = A_i dx_i + B_i du_i + dwx_i,      dx_0 = 0,
         Hx_i dx_i + Hu_i du_i + dwh_i <= 0,          Hx_N dx_N + dwh_N <= 0,

with ``z_i = (dx_i, du_i)`` the deviation from the iterate.  The matrices
``A, B, Hx, Hu`` come from a sensitivity policy (pointwise or integrated
Jacobians); the offsets are always the nonlinear residuals at the iterate.

Scaling convention: quadratic costs are written ``||x||_Q^2 + ||u||_R^2``
for reporting, while the QP (and every Lagrangian-derived quantity: exact
Hessians, KKT residuals, multipliers) uses the one-half-scaled form so that
the weight matrices appear unscaled in ``M_i``.  Both forms have identical
minimizers; only the multiplier scale differs, and it is used consistently
throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import sensitivity as sens
from .model import (
    ConstraintSet,
    DimensionError,
    DynamicsModel,
    OutputMap,
    hessian_lagrangian_stage,
    hessian_lagrangian_terminal,
)

GAUSS_NEWTON = "gauss_newton"
EXACT_LAGRANGIAN = "exact_lagrangian"

EPS_REG = 1e-8  # eigenvalue floor applied to stage Hessians


@dataclass(frozen=True)
class QuadraticCost:
    """Stage ``||x||_Q^2 + ||u||_R^2`` with terminal ``||x||_W^2``."""

    Q: np.ndarray
    R: np.ndarray
    W: np.ndarray


@dataclass(frozen=True)
class OutputQuadraticCost:
    """Stage ``||c(x)||_Qy^2 + ||[u; 1]||_Raug^2`` with terminal ``||c(x)||_Qy^2``.

    ``Raug`` acts on the input extended by a constant 1; its off-diagonal
    last column injects terms linear in ``u`` (progress rewards, slack
    penalties) while its upper-left block must be positive definite.
    """

    outputs: OutputMap
    Qy: np.ndarray
    Raug: np.ndarray


@dataclass(frozen=True)
class OcpProblem:
    """Discrete-time OCP over horizon ``N`` from initial state ``x0``."""

    model: DynamicsModel
    constraints: ConstraintSet
    cost: QuadraticCost | OutputQuadraticCost
    N: int
    x0: np.ndarray

    @property
    def Q(self):
        return self.cost.Q

    @property
    def R(self):
        return self.cost.R

    @property
    def W(self):
        return self.cost.W


def _check_psd(name: str, M: np.ndarray, floor: float):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise DimensionError(f"{name} must be symmetric")
    if M.shape[0] and np.min(np.linalg.eigvalsh(M)) < floor:
        raise DimensionError(f"{name} violates its eigenvalue floor {floor:g}")
    return M


def make_ocp(
    model: DynamicsModel,
    constraints: ConstraintSet,
    cost: QuadraticCost | OutputQuadraticCost,
    N: int,
    x0: np.ndarray,
) -> OcpProblem:
    """Validated :class:`OcpProblem` constructor."""
    if model.continuous:
        raise DimensionError("OcpProblem expects a discretized model")
    if N < 1:
        raise DimensionError(f"horizon must be >= 1, got {N}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,):
        raise DimensionError(f"x0 must have shape ({model.n_x},), got {x0.shape}")
    if isinstance(cost, QuadraticCost):
        _check_psd("Q", cost.Q, -1e-10)
        _check_psd("W", cost.W, -1e-10)
        _check_psd("R", cost.R, 1e-10)
        if cost.Q.shape[0] != model.n_x or cost.R.shape[0] != model.n_u or cost.W.shape[0] != model.n_x:
            raise DimensionError("cost matrices do not match model dimensions")
    else:
        _check_psd("Qy", cost.Qy, -1e-10)
        _check_psd("Raug", cost.Raug, -np.inf)
        _check_psd("Raug input block", cost.Raug[:-1, :-1], 1e-10)
        if cost.Raug.shape[0] != model.n_u + 1:
            raise DimensionError("Raug must act on [u; 1]")
        if cost.Qy.shape[0] != cost.outputs.n_y:
            raise DimensionError("Qy must match the output dimension")
    return OcpProblem(model, constraints, cost, N, x0)


# ---------------------------------------------------------------------------
# cost evaluation and gradients (half-scaled convention for gradients)


def eval_nlp_cost(ocp: OcpProblem, X: np.ndarray, U: np.ndarray) -> float:
    """Reported (unscaled) trajectory cost."""
    N = ocp.N
    if X.shape != (N + 1, ocp.model.n_x) or U.shape != (N, ocp.model.n_u):
        raise DimensionError("trajectory shapes do not match the OCP")
    c = ocp.cost
    if isinstance(c, QuadraticCost):
        stage = np.einsum("ij,jk,ik->", X[:N], c.Q, X[:N]) + np.einsum("ij,jk,ik->", U, c.R, U)
        return float(stage + X[N] @ c.W @ X[N])
    xc = [X[:, j] for j in range(ocp.model.n_x)]
    Y = np.stack([np.broadcast_to(ad.value(v), (N + 1,)) for v in c.outputs.eval_fn(xc)], axis=-1)
    Ue = np.hstack([U, np.ones((N, 1))])
    return float(np.einsum("ij,jk,ik->", Y, c.Qy, Y) + np.einsum("ij,jk,ik->", Ue, c.Raug, Ue))


def cost_gradients(ocp: OcpProblem, X, U, C=None, y=None, CN=None, yN=None):
    """Half-scaled stage cost gradients ``(gx (N,n_x), gu (N,n_u), gxN)``.

    For output costs the state gradient is ``C' Qy y`` with ``C`` the supplied
    (policy-dependent) output sensitivity and ``y`` the output at the iterate.
    """
    N = ocp.N
    c = ocp.cost
    if isinstance(c, QuadraticCost):
        return X[:N] @ c.Q.T, U @ c.R.T, c.W @ X[N]
    if C is None or y is None or CN is None or yN is None:
        raise DimensionError("output-cost gradients need output sensitivities")
    gx = np.einsum("iyx,iy->ix", C, y @ c.Qy.T)
    Ruu = c.Raug[:-1, :-1]
    ru1 = c.Raug[:-1, -1]
    gu = U @ Ruu.T + ru1
    gxN = CN.T @ (c.Qy @ yN)
    return gx, gu, gxN


def eval_constraints(ocp: OcpProblem, X: np.ndarray, U: np.ndarray):
    """Stacked constraint values and the max violation ``max(0, h)``."""
    N = ocp.N
    cs = ocp.constraints
    vals = []
    if cs.n_h > 0:
        xc = [X[:N, j] for j in range(ocp.model.n_x)]
        uc = [U[:, j] for j in range(ocp.model.n_u)]
        H = np.stack(
            [np.broadcast_to(ad.value(v), (N,)) for v in cs.stage_fn(xc, uc)], axis=-1
        )
        vals.append(H.ravel())
    if cs.n_hN > 0:
        vals.append(np.array([float(ad.value(v)) for v in cs.terminal_fn(list(X[N]))]))
    stacked = np.concatenate(vals) if vals else np.zeros(0)
    violation = float(max(0.0, np.max(stacked))) if stacked.size else 0.0
    return stacked, violation


# ---------------------------------------------------------------------------
# QP data


@dataclass
class QpData:
    """Stage-structured QP (see the module docstring for the template)."""

    n_x: int
    n_u: int
    N: int
    M: np.ndarray  # (N, nz, nz)
    q: np.ndarray  # (N, nz)
    A: np.ndarray  # (N, n_x, n_x)
    B: np.ndarray  # (N, n_x, n_u)
    wx: np.ndarray  # (N, n_x)
    Hx: np.ndarray  # (N, n_h, n_x)
    Hu: np.ndarray  # (N, n_h, n_u)
    wh: np.ndarray  # (N, n_h)
    MN: np.ndarray  # (n_x, n_x)
    qN: np.ndarray  # (n_x,)
    HxN: np.ndarray  # (n_hN, n_x)
    whN: np.ndarray  # (n_hN,)
    reg_count: int = 0

    @property
    def n_h(self):
        return self.Hx.shape[1]

    @property
    def n_hN(self):
        return self.HxN.shape[0]


def regularize(M: np.ndarray, floor: float = EPS_REG):
    """Clip eigenvalues from below; untouched matrices pass through bitwise."""
    evals = np.linalg.eigvalsh(M)
    if evals[0] >= floor:
        return M, False
    w, V = np.linalg.eigh(M)
    return (V * np.maximum(w, floor)) @ V.T, True


def _exact_output_stage_hessian(ocp: OcpProblem, x, u, dyn_mult, ineq_mult):
    """Exact stage Hessian for output costs, via second-order AD."""
    c = ocp.cost
    n = ocp.model.n_x
    m = ocp.model.n_u
    Qy, Raug = c.Qy, c.Raug

    def lag(w):
        xc, uc = w[:n], w[n:]
        ys = c.outputs.eval_fn(xc)
        ue = list(uc) + [1.0]
        acc = 0.0
        for i in range(len(ys)):
            for j in range(len(ys)):
                if Qy[i, j] != 0.0:
                    acc = acc + 0.5 * Qy[i, j] * ys[i] * ys[j]
        for i in range(m + 1):
            for j in range(m + 1):
                if Raug[i, j] != 0.0:
                    acc = acc + 0.5 * Raug[i, j] * ue[i] * ue[j]
        for th, fk in zip(dyn_mult, ocp.model.eval_fn(xc, uc)):
            if th != 0.0:
                acc = acc + th * fk
        if ocp.constraints.n_h > 0:
            for mu, hk in zip(ineq_mult, ocp.constraints.stage_fn(xc, uc)):
                if mu != 0.0:
                    acc = acc + mu * hk
        return acc

    return ad.hessian(lag, list(x) + list(u))


def assemble_qp(
    ocp: OcpProblem,
    iterate,
    sens_policy: sens.SensitivityPolicy,
    hessian: str = GAUSS_NEWTON,
    anchors=None,
) -> QpData:
    """Build the stage QP at the iterate under the selected policies.

    ``iterate`` provides ``X, U`` and (for the exact-Hessian path)
    ``theta, mu, mu_N`` multiplier estimates.  ``anchors = (Xa, Ua)`` is
    required by the ``ftc`` sensitivity path.
    """
    N, n, m = ocp.N, ocp.model.n_x, ocp.model.n_u
    X = np.asarray(iterate.X, dtype=float)
    U = np.asarray(iterate.U, dtype=float)
    if X.shape != (N + 1, n) or U.shape != (N, m):
        raise DimensionError(f"iterate shapes {X.shape}/{U.shape} do not match the OCP")
    if not np.array_equal(X[0], np.asarray(ocp.x0, dtype=float)):
        raise DimensionError("iterate does not start at the OCP initial state")
    outputs = ocp.cost.outputs if isinstance(ocp.cost, OutputQuadraticCost) else None

    if sens_policy.kind == "linearize":
        T = sens.linearize_trajectory(ocp.model, ocp.constraints, X, U, outputs)
    else:
        if anchors is None:
            raise DimensionError("ftc sensitivities need anchor sequences")
        T = sens.ftc_trajectory(ocp.model, ocp.constraints, X, U, anchors[0], anchors[1], sens_policy.rule, outputs)

    nz = n + m
    M = np.zeros((N, nz, nz))
    q = np.zeros((N, nz))
    gx, gu, gxN = cost_gradients(ocp, X, U, T.C, T.y, T.CN, T.yN)
    q[:, :n] = gx
    q[:, n:] = gu

    c = ocp.cost
    if isinstance(c, QuadraticCost):
        MN = np.array(c.W, dtype=float)
        base = np.zeros((nz, nz))
        base[:n, :n] = c.Q
        base[n:, n:] = c.R
        if hessian == GAUSS_NEWTON:
            M[:] = base
        else:
            for i in range(N):
                M[i] = hessian_lagrangian_stage(
                    ocp.model, ocp.constraints, X[i], U[i], iterate.theta[i + 1], iterate.mu[i], c.Q, c.R
                )
            MN = hessian_lagrangian_terminal(ocp.constraints, X[N], c.W, iterate.mu_N)
    else:
        Ruu = c.Raug[:-1, :-1]
        if hessian == GAUSS_NEWTON:
            M[:, :n, :n] = np.einsum("iyx,yz,izw->ixw", T.C, c.Qy, T.C)
            M[:, n:, n:] = Ruu
        else:
            for i in range(N):
                M[i] = _exact_output_stage_hessian(ocp, X[i], U[i], iterate.theta[i + 1], iterate.mu[i])
        MN = T.CN.T @ c.Qy @ T.CN
        if hessian == EXACT_LAGRANGIAN:
            def term(xc):
                ys = c.outputs.eval_fn(xc)
                acc = 0.0
                for i in range(len(ys)):
                    for j in range(len(ys)):
                        if c.Qy[i, j] != 0.0:
                            acc = acc + 0.5 * c.Qy[i, j] * ys[i] * ys[j]
                for mu, hk in zip(iterate.mu_N, ocp.constraints.terminal_fn(xc)):
                    if mu != 0.0:
                        acc = acc + mu * hk
                return acc

            MN = ad.hessian(term, list(X[N]))

    qN = gxN
    reg_count = 0
    for i in range(N):
        M[i], clipped = regularize(M[i])
        reg_count += clipped
    MN, clipped = regularize(MN)
    reg_count += clipped

    return QpData(
        n_x=n,
        n_u=m,
        N=N,
        M=M,
        q=q,
        A=T.A,
        B=T.B,
        wx=T.dwx,
        Hx=T.Hx,
        Hu=T.Hu,
        wh=T.dwh,
        MN=MN,
        qN=np.asarray(qN, dtype=float),
        HxN=T.HxN,
        whN=T.dwhN,
        reg_count=reg_count,
    )
