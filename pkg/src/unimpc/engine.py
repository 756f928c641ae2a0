"""Outer-iteration engine for the stage-QP solver family.

Each outer iteration builds one convex stage QP from the current iterate
through a sensitivity policy (pointwise linearization or integrated
quadrature sensitivities around anchor trajectories), solves it, and applies
an update rule:

* additive update ``(X, U) += (dX, dU)`` for pointwise linearization and for
  integrated sensitivities anchored at the previous iterate (the two are
  then the same algorithm, and their iterates coincide);
* re-simulation ``U += dU; X = nonlinear rollout`` for integrated
  sensitivities with any other anchor policy, so every iterate satisfies the
  dynamics exactly and fixed points are feasible trajectories.

Multipliers are taken from the latest QP solve.  Termination is by NLP KKT
residual, by iterate change (scheduling-trace delta), or by a fixed
iteration count; a failed QP solve triggers step halving toward the previous
iterate before aborting.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import qpsolve
from .model import eval_dynamics, rollout
from .ocp import (
    GAUSS_NEWTON,
    OcpProblem,
    QpData,
    assemble_qp,
    cost_gradients,
    eval_constraints,
    eval_nlp_cost,
)
from .qpsolve import SOLVED, QpSolution, QpTolerances
from .sensitivity import (
    PreviousIterate,
    SensitivityPolicy,
    linearize_trajectory,
    select_anchors,
)

CONVERGED = "converged"
MAX_OUTER = "max_outer"
ABORTED = "aborted"

solve_qp = qpsolve.solve_qp  # module-level alias; replaceable in tests


class QpFailure(RuntimeError):
    def __init__(self, solution: QpSolution):
        super().__init__(f"qp solve failed with status {solution.status!r}")
        self.solution = solution


# ---------------------------------------------------------------------------
# iterate


@dataclass
class Trajectory:
    X: np.ndarray  # (N+1, n_x)
    U: np.ndarray  # (N, n_u)
    theta: np.ndarray  # (N+1, n_x) dynamics multipliers (theta[0]: pinned state)
    mu: np.ndarray  # (N, n_h)
    mu_N: np.ndarray  # (n_hN,)

    def copy(self) -> "Trajectory":
        return Trajectory(self.X.copy(), self.U.copy(), self.theta.copy(), self.mu.copy(), self.mu_N.copy())


def cold_start(ocp: OcpProblem) -> Trajectory:
    """Constant-state iterate at ``x0`` with zero inputs and multipliers."""
    n_h = ocp.constraints.n_h if ocp.constraints is not None else 0
    n_hN = ocp.constraints.n_hN if ocp.constraints is not None else 0
    return Trajectory(
        X=np.tile(np.asarray(ocp.x0, dtype=float), (ocp.N + 1, 1)),
        U=np.zeros((ocp.N, ocp.model.n_u)),
        theta=np.zeros((ocp.N + 1, ocp.model.n_x)),
        mu=np.zeros((ocp.N, n_h)),
        mu_N=np.zeros(n_hN),
    )


def shift_trajectory(traj: Trajectory, duplicate_last: bool = True) -> Trajectory:
    """Advance the iterate one stage (receding-horizon initialization)."""
    out = traj.copy()
    out.X[:-1] = traj.X[1:]
    out.U[:-1] = traj.U[1:]
    out.theta[:-1] = traj.theta[1:]
    if traj.mu.shape[0] >= 2:
        out.mu[:-1] = traj.mu[1:]
    if duplicate_last:
        out.X[-1] = traj.X[-1]
        out.U[-1] = traj.U[-1]
        out.theta[-1] = traj.theta[-1]
        if traj.mu.shape[0] >= 1:
            out.mu[-1] = traj.mu[-1]
    return out


def _blend(a: Trajectory, b: Trajectory, t: float) -> Trajectory:
    """Convex combination ``(1-t)*a + t*b`` of two iterates."""
    return Trajectory(
        (1 - t) * a.X + t * b.X,
        (1 - t) * a.U + t * b.U,
        (1 - t) * a.theta + t * b.theta,
        (1 - t) * a.mu + t * b.mu,
        (1 - t) * a.mu_N + t * b.mu_N,
    )


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class KktResidual:
    eps: float = 1e-8


@dataclass(frozen=True)
class SchedulingDelta:
    eps: float = 1e-8


@dataclass(frozen=True)
class FixedIterations:
    count: int = 10


@dataclass(frozen=True)
class ZeroOrderPartition:
    """State components treated as exogenous during the QP solve.

    ``z_indices`` selects the decoupled components; their increments are
    precomputed by a linear or nonlinear rollout and folded into the QP data
    as known offsets, shrinking the QP state dimension.
    """

    z_indices: tuple[int, ...] = ()
    propagation: str = "linear"  # "linear" | "nonlinear"

    def __post_init__(self):
        if self.propagation not in ("linear", "nonlinear"):
            raise ValueError(f"unknown propagation {self.propagation!r}")


@dataclass(frozen=True)
class IterationPolicy:
    sensitivity: SensitivityPolicy
    anchors: object
    hessian: str = GAUSS_NEWTON
    termination: object = KktResidual()
    max_outer: int = 100
    zero_order: ZeroOrderPartition | None = None
    qp_tols: QpTolerances = QpTolerances()


@dataclass(frozen=True)
class AnchorContext:
    """Run-time quantities anchor policies may draw on."""

    k: int = 0
    x_meas: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    optimal_ref: Trajectory | None = None


@dataclass
class StepReport:
    iter_index: int
    kkt: dict
    sched_delta: float
    step_norm: float
    qp_iters: int
    qp_status: str
    cost: float
    violation: float
    reg_count: int
    t_prep_us: float
    t_fb_us: float


@dataclass
class SolveResult:
    trajectory: Trajectory
    status: str
    reports: list
    r_ratios: list
    warm: QpSolution | None


# ---------------------------------------------------------------------------
# NLP KKT residual


def nlp_kkt_residual(ocp: OcpProblem, traj: Trajectory) -> dict:
    """First-order optimality residuals of an iterate with its multipliers.

    Stationarity covers the rows for ``x_1..x_N`` and ``u_0..u_{N-1}`` (the
    pinned ``x_0`` row is closed by its own multiplier and carries no
    information).  Feasibility is the worst of dynamics defect, inequality
    violation, initial-state mismatch, and multiplier negativity.
    """
    N = ocp.N
    outputs = getattr(ocp.cost, "outputs", None)
    sens = linearize_trajectory(ocp.model, ocp.constraints, traj.X, traj.U, outputs)
    gx, gu, gxN = cost_gradients(ocp, traj.X, traj.U, sens.C, sens.y, sens.CN, sens.yN)
    h = sens.dwh
    hN = sens.dwhN
    ru = gu + np.einsum("ixu,ix->iu", sens.B, traj.theta[1:])
    rx = gx + np.einsum("ixw,ix->iw", sens.A, traj.theta[1:])
    if h.shape[1]:
        ru += np.einsum("ihu,ih->iu", sens.Hu, traj.mu)
        rx += np.einsum("ihx,ih->ix", sens.Hx, traj.mu)
    rx[1:] -= traj.theta[1:N]
    rx = rx[1:]  # the pinned x_0 row is closed by its own multiplier
    rxN = gxN - traj.theta[N]
    if hN.shape[0]:
        rxN = rxN + sens.HxN.T @ traj.mu_N
    stat = max(
        float(np.max(np.abs(ru))) if ru.size else 0.0,
        float(np.max(np.abs(rx))) if rx.size else 0.0,
        float(np.max(np.abs(rxN))) if rxN.size else 0.0,
    )
    defect = float(np.max(np.abs(sens.dwx)))
    feas = max(
        defect,
        float(np.max(np.abs(traj.X[0] - ocp.x0))),
        float(np.max(h)) if h.size else 0.0,
        float(np.max(hN)) if hN.size else 0.0,
        float(np.max(-traj.mu)) if traj.mu.size else 0.0,
        float(np.max(-traj.mu_N)) if traj.mu_N.size else 0.0,
        0.0,
    )
    comp = max(
        float(np.max(np.abs(traj.mu * h))) if h.size else 0.0,
        float(np.max(np.abs(traj.mu_N * hN))) if hN.size else 0.0,
        0.0,
    )
    return {
        "stationarity": stat,
        "feasibility": feas,
        "complementarity": comp,
        "max": max(stat, feas, comp),
    }


# ---------------------------------------------------------------------------
# zero-order state decoupling


@dataclass
class ZeroOrderInfo:
    z_idx: np.ndarray
    y_idx: np.ndarray
    dz: np.ndarray  # (N+1, n_z) precomputed increments of the decoupled states
    n_x_full: int


def zero_order_reduce(
    qp: QpData,
    part: ZeroOrderPartition,
    traj: Trajectory,
    model=None,
) -> tuple[QpData, ZeroOrderInfo | None]:
    """Eliminate the partitioned state components from a stage QP.

    Their increments are rolled out up front — linearly from the QP data or
    through the nonlinear dynamics with the remaining states anchored at the
    iterate — and folded into the offsets, constraint constants, and cost
    gradients of the remaining variables.  An empty partition returns the QP
    unchanged.
    """
    if not part.z_indices:
        return qp, None
    n_x, n_u, N = qp.n_x, qp.n_u, qp.N
    z_idx = np.asarray(sorted(part.z_indices), dtype=int)
    if z_idx.size and (z_idx[0] < 0 or z_idx[-1] >= n_x):
        raise ValueError("z_indices out of range")
    if len(set(part.z_indices)) != len(part.z_indices):
        raise ValueError("duplicate z_indices")
    y_idx = np.array([i for i in range(n_x) if i not in set(z_idx.tolist())], dtype=int)
    n_z, n_y = len(z_idx), len(y_idx)
    if n_y == 0:
        raise ValueError("cannot decouple every state component")

    dz = np.zeros((N + 1, n_z))
    if part.propagation == "linear":
        Azz = qp.A[:, z_idx[:, None], z_idx[None, :]]
        for i in range(N):
            dz[i + 1] = Azz[i] @ dz[i] + qp.wx[i][z_idx]
    else:
        if model is None:
            raise ValueError("nonlinear propagation needs the dynamics model")
        z = traj.X[0][z_idx].copy()
        for i in range(N):
            xi = traj.X[i].copy()
            xi[z_idx] = z
            z = eval_dynamics(model, xi, traj.U[i])[z_idx]
            dz[i + 1] = z - traj.X[i + 1][z_idx]

    # selection of kept rows/cols inside the stage variable [x; u]
    keep = np.concatenate([y_idx, n_x + np.arange(n_u)])
    zsel = z_idx
    M_r = qp.M[:, keep[:, None], keep[None, :]]
    q_r = qp.q[:, keep] + np.einsum("izw,iw->iz", qp.M[:, keep[:, None], zsel[None, :]], dz[:N])
    A_r = qp.A[:, y_idx[:, None], y_idx[None, :]]
    B_r = qp.B[:, y_idx, :]
    wx_r = qp.wx[:, y_idx] + np.einsum("iyz,iz->iy", qp.A[:, y_idx[:, None], zsel[None, :]], dz[:N])
    Hx_r = qp.Hx[:, :, y_idx]
    Hu_r = qp.Hu
    wh_r = qp.wh + (np.einsum("ihz,iz->ih", qp.Hx[:, :, zsel], dz[:N]) if qp.n_h else 0.0)
    MN_r = qp.MN[y_idx[:, None], y_idx[None, :]]
    qN_r = qp.qN[y_idx] + qp.MN[y_idx[:, None], zsel[None, :]] @ dz[N]
    HxN_r = qp.HxN[:, y_idx]
    whN_r = qp.whN + (qp.HxN[:, zsel] @ dz[N] if qp.n_hN else 0.0)
    red = QpData(
        n_x=n_y,
        n_u=n_u,
        N=N,
        M=M_r,
        q=q_r,
        A=A_r,
        B=B_r,
        wx=wx_r,
        Hx=Hx_r,
        Hu=Hu_r,
        wh=wh_r,
        MN=MN_r,
        qN=qN_r,
        HxN=HxN_r,
        whN=whN_r,
        reg_count=qp.reg_count,
    )
    return red, ZeroOrderInfo(z_idx=z_idx, y_idx=y_idx, dz=dz, n_x_full=n_x)


def zero_order_expand(sol: QpSolution, info: ZeroOrderInfo | None) -> QpSolution:
    """Re-insert decoupled components into a reduced-space QP solution."""
    if info is None:
        return sol
    Np1 = sol.dX.shape[0]
    dX = np.zeros((Np1, info.n_x_full))
    dX[:, info.y_idx] = sol.dX
    dX[:, info.z_idx] = info.dz
    theta = np.zeros((Np1, info.n_x_full))
    theta[:, info.y_idx] = sol.theta
    return QpSolution(dX, sol.dU, theta, sol.mu, sol.mu_N, sol.status, sol.iterations, sol.residuals)


# ---------------------------------------------------------------------------
# one outer iteration


def outer_step(
    ocp: OcpProblem,
    traj: Trajectory,
    policy: IterationPolicy,
    ctx: AnchorContext = AnchorContext(),
    warm: QpSolution | None = None,
    iter_index: int = 0,
) -> tuple[Trajectory, StepReport, QpSolution]:
    """Assemble and solve one stage QP, then update the iterate."""
    t0 = time.perf_counter()
    anchors = None
    if policy.sensitivity.kind == "ftc":
        x_meas = ctx.x_meas if ctx.x_meas is not None else np.asarray(ocp.x0)
        anchors = select_anchors(
            policy.anchors,
            ctx.k,
            x_meas,
            ctx.u_prev,
            traj.X,
            traj.U,
            optimal_ref=ctx.optimal_ref,
        )
    qp = assemble_qp(ocp, traj, policy.sensitivity, policy.hessian, anchors)
    info = None
    if policy.zero_order is not None:
        qp, info = zero_order_reduce(qp, policy.zero_order, traj, ocp.model)
        warm = None  # reduced space: skip cross-iteration warm starting
    t1 = time.perf_counter()
    sol_red = solve_qp(qp, warm, policy.qp_tols)
    if sol_red.status != SOLVED:
        raise QpFailure(sol_red)
    sol = zero_order_expand(sol_red, info)

    # Re-simulation refreshes the iterate from the nonlinear model.  It is the
    # scheduling-update rule for quadrature policies with external anchors,
    # and it is mandatory under zero-order decoupling: the reduced QP cannot
    # move the z components, so only a rollout keeps them consistent with the
    # updated inputs.
    resim = (
        policy.sensitivity.kind == "ftc" and not isinstance(policy.anchors, PreviousIterate)
    ) or policy.zero_order is not None
    U_new = traj.U + sol.dU
    if resim:
        X_new = rollout(ocp.model, np.asarray(ocp.x0, dtype=float), U_new)
    else:
        X_new = traj.X + sol.dX
    new_traj = Trajectory(X_new, U_new, sol.theta.copy(), sol.mu.copy(), sol.mu_N.copy())
    t2 = time.perf_counter()

    kkt = nlp_kkt_residual(ocp, new_traj)
    cost = eval_nlp_cost(ocp, X_new, U_new)
    _, violation = eval_constraints(ocp, X_new, U_new)
    sched_delta = max(
        float(np.max(np.abs(X_new - traj.X))),
        float(np.max(np.abs(U_new - traj.U))) if U_new.size else 0.0,
    )
    step_norm = max(
        float(np.max(np.abs(sol.dX))),
        float(np.max(np.abs(sol.dU))) if sol.dU.size else 0.0,
    )
    rep = StepReport(
        iter_index=iter_index,
        kkt=kkt,
        sched_delta=sched_delta,
        step_norm=step_norm,
        qp_iters=sol_red.iterations,
        qp_status=sol_red.status,
        cost=cost,
        violation=violation,
        reg_count=qp.reg_count,
        t_prep_us=(t1 - t0) * 1e6,
        t_fb_us=(t2 - t1) * 1e6,
    )
    return new_traj, rep, sol_red


# ---------------------------------------------------------------------------
# full solve to the policy's termination criterion


def solve_ocp(
    ocp: OcpProblem,
    policy: IterationPolicy,
    traj: Trajectory | None = None,
    ctx: AnchorContext = AnchorContext(),
    warm: QpSolution | None = None,
) -> SolveResult:
    if traj is None:
        traj = cold_start(ocp)
    term = policy.termination
    limit = term.count if isinstance(term, FixedIterations) else policy.max_outer
    reports: list[StepReport] = []
    r_ratios: list[float] = []
    r_before = nlp_kkt_residual(ocp, traj)["max"]
    prev = None
    halvings = 0
    status = MAX_OUTER
    it = 0
    while it < limit:
        try:
            new_traj, rep, warm_new = outer_step(ocp, traj, policy, ctx, warm, iter_index=it)
        except QpFailure:
            halvings += 1
            if prev is None or halvings > 5:
                status = ABORTED
                break
            traj = _blend(prev, traj, 0.5)
            warm = None
            continue
        halvings = 0
        prev = traj
        traj = new_traj
        warm = warm_new
        reports.append(rep)
        if r_before > 0.0:
            r_ratios.append(rep.kkt["max"] / r_before)
        r_before = rep.kkt["max"]
        it += 1
        if isinstance(term, KktResidual) and rep.kkt["max"] <= term.eps:
            status = CONVERGED
            break
        if isinstance(term, SchedulingDelta) and rep.sched_delta <= term.eps:
            status = CONVERGED
            break
    if status == MAX_OUTER and isinstance(term, FixedIterations) and it >= limit:
        status = CONVERGED
    return SolveResult(trajectory=traj, status=status, reports=reports, r_ratios=r_ratios, warm=warm)


# ---------------------------------------------------------------------------
# real-time iteration step


def rti_step(
    ocp: OcpProblem,
    traj: Trajectory,
    policy: IterationPolicy,
    x_meas: np.ndarray,
    ctx: AnchorContext = AnchorContext(),
    warm: QpSolution | None = None,
) -> tuple[np.ndarray, Trajectory, StepReport, QpSolution]:
    """One QP per sample: pin the measured state, solve once, return u[0].

    The caller shifts the returned trajectory before the next sample (see
    :func:`shift_trajectory`).
    """
    x_meas = np.asarray(x_meas, dtype=float)
    ocp_k = replace(ocp, x0=x_meas)
    traj_k = traj.copy()
    traj_k.X[0] = x_meas
    ctx_k = replace(ctx, x_meas=x_meas)
    new_traj, rep, warm_new = outer_step(ocp_k, traj_k, policy, ctx_k, warm)
    return new_traj.U[0].copy(), new_traj, rep, warm_new
