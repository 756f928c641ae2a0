"""Structured convex QP solver for the stage template of :class:`QpData`.

A primal-dual interior-point method (Mehrotra predictor-corrector) whose
Newton systems are solved by a Riccati backward/forward sweep, so per-solve
work grows linearly with the horizon.  After the barrier loop converges, an
active-set polish re-solves the equality-constrained KKT system once through
a sparse factorization; when its consistency gates pass this drives the KKT
residuals close to machine precision and makes the returned solution a
deterministic function of the QP data alone.

Sign conventions: the dynamics multiplier ``theta[i+1]`` is attached to
``A_i dx_i + B_i du_i + wx_i - dx_{i+1} = 0`` and ``theta[0]`` to the pinned
initial state ``dx_0 = 0`` (it makes the first stationarity row vanish
identically and is reported for diagnostics only).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ocp import QpData

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
NUMERIC_ERROR = "numeric_error"


@dataclass(frozen=True)
class QpTolerances:
    tol: float = 1e-8
    max_iter: int = 4000
    polish: bool = True


@dataclass
class QpSolution:
    dX: np.ndarray  # (N+1, n_x)
    dU: np.ndarray  # (N, n_u)
    theta: np.ndarray  # (N+1, n_x)
    mu: np.ndarray  # (N, n_h)
    mu_N: np.ndarray  # (n_hN,)
    status: str
    iterations: int
    residuals: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Riccati sweep


def _riccati(M, q, A, B, w, MN, qN):
    """Solve the equality-constrained stage QP by backward/forward recursion.

    Returns ``(dX, dU, lam)`` with ``lam[i]`` (i >= 1) the multiplier of the
    dynamics row producing ``dx_i``; ``lam[0]`` is left zero.
    """
    N, n = A.shape[0], A.shape[1]
    m = B.shape[2]
    P = 0.5 * (MN + MN.T)
    p = qN.copy()
    Ks = np.empty((N, m, n))
    ks = np.empty((N, m))
    Ps = [None] * (N + 1)
    ps = [None] * (N + 1)
    Ps[N], ps[N] = P, p
    for i in range(N - 1, -1, -1):
        Qxx = M[i][:n, :n]
        Qxu = M[i][:n, n:]
        Quu = M[i][n:, n:]
        PA = P @ A[i]
        PB = P @ B[i]
        Suu = Quu + B[i].T @ PB
        Sux = Qxu.T + B[i].T @ PA
        pw = p + P @ w[i]
        su = q[i][n:] + B[i].T @ pw
        try:
            L = np.linalg.cholesky(0.5 * (Suu + Suu.T))
        except np.linalg.LinAlgError:
            jitter = 1e-12 * (1.0 + np.trace(Suu) / max(1, m))
            L = np.linalg.cholesky(0.5 * (Suu + Suu.T) + jitter * np.eye(m))
        K = -np.linalg.solve(L.T, np.linalg.solve(L, Sux))
        k = -np.linalg.solve(L.T, np.linalg.solve(L, su))
        P = Qxx + A[i].T @ PA + Sux.T @ K
        P = 0.5 * (P + P.T)
        p = q[i][:n] + A[i].T @ pw + Sux.T @ k
        Ks[i], ks[i] = K, k
        Ps[i], ps[i] = P, p
    dX = np.zeros((N + 1, n))
    dU = np.empty((N, m))
    lam = np.zeros((N + 1, n))
    for i in range(N):
        dU[i] = Ks[i] @ dX[i] + ks[i]
        dX[i + 1] = A[i] @ dX[i] + B[i] @ dU[i] + w[i]
        lam[i + 1] = Ps[i + 1] @ dX[i + 1] + ps[i + 1]
    return dX, dU, lam


# ---------------------------------------------------------------------------
# residuals


def _stationarity(qp: QpData, dX, dU, theta, mu, mu_N):
    """Stage/terminal stationarity rows; the pinned dx_0 row is excluded."""
    N, n = qp.N, qp.n_x
    z = np.hstack([dX[:N], dU])
    r = np.einsum("izw,iw->iz", qp.M, z) + qp.q
    r[:, :n] += np.einsum("ixw,ix->iw", qp.A, theta[1:])
    r[1:, :n] -= theta[1:N]
    r[:, n:] += np.einsum("ixu,ix->iu", qp.B, theta[1:])
    if qp.n_h:
        r[:, :n] += np.einsum("ihx,ih->ix", qp.Hx, mu)
        r[:, n:] += np.einsum("ihu,ih->iu", qp.Hu, mu)
    r[0, :n] = 0.0
    rN = qp.MN @ dX[N] + qp.qN - theta[N]
    if qp.n_hN:
        rN += qp.HxN.T @ mu_N
    return r, rN


def _dyn_residual(qp: QpData, dX, dU):
    return np.einsum("ixw,iw->ix", qp.A, dX[:-1]) + np.einsum("ixu,iu->ix", qp.B, dU) + qp.wx - dX[1:]


def _ineq_values(qp: QpData, dX, dU):
    g = np.einsum("ihx,ix->ih", qp.Hx, dX[:-1]) + np.einsum("ihu,iu->ih", qp.Hu, dU) + qp.wh
    gN = qp.HxN @ dX[-1] + qp.whN
    return g, gN


def theta0_from_solution(qp: QpData, sol_dU, theta, mu):
    """Multiplier of the pinned initial state, from the first stationarity row."""
    n = qp.n_x
    r = qp.M[0][:n, n:] @ sol_dU[0] + qp.q[0][:n] + qp.A[0].T @ theta[1]
    if qp.n_h:
        r += qp.Hx[0].T @ mu[0]
    return -r


def kkt_residuals_qp(qp: QpData, sol: QpSolution) -> dict:
    """Independent max-norm KKT residuals of a candidate solution."""
    rL, rLN = _stationarity(qp, sol.dX, sol.dU, sol.theta, sol.mu, sol.mu_N)
    # pinned-state row, closed by theta[0]
    n = qp.n_x
    r0 = qp.M[0][:n, :n] @ sol.dX[0] + qp.M[0][:n, n:] @ sol.dU[0] + qp.q[0][:n] + qp.A[0].T @ sol.theta[1]
    if qp.n_h:
        r0 += qp.Hx[0].T @ sol.mu[0]
    r0 += sol.theta[0]
    stat = max(
        float(np.max(np.abs(rL))) if rL.size else 0.0,
        float(np.max(np.abs(rLN))) if rLN.size else 0.0,
        float(np.max(np.abs(r0))) if r0.size else 0.0,
    )
    g, gN = _ineq_values(qp, sol.dX, sol.dU)
    primal = max(
        float(np.max(np.abs(_dyn_residual(qp, sol.dX, sol.dU)))),
        float(np.max(np.abs(sol.dX[0]))),
        float(np.max(g)) if g.size else 0.0,
        float(np.max(gN)) if gN.size else 0.0,
        0.0,
    )
    dual = max(
        float(np.max(-sol.mu)) if sol.mu.size else 0.0,
        float(np.max(-sol.mu_N)) if sol.mu_N.size else 0.0,
        0.0,
    )
    comp = max(
        float(np.max(np.abs(sol.mu * g))) if g.size else 0.0,
        float(np.max(np.abs(sol.mu_N * gN))) if gN.size else 0.0,
        0.0,
    )
    return {"stationarity": stat, "primal": primal, "dual": dual, "complementarity": comp}


# ---------------------------------------------------------------------------
# active-set polish


def _polish(qp: QpData, act, act_N):
    """One sparse equality-KKT solve on a fixed active set.

    Variables: ``dx_1..dx_N``, ``du_0..du_{N-1}``, ``theta_1..theta_N``,
    then one multiplier per active row.  Returns ``None`` when the system is
    singular; feasibility gates are checked by the caller.
    """
    N, n, m = qp.N, qp.n_x, qp.n_u
    ox = lambda i: (i - 1) * n  # dx_i, i >= 1
    ou = N * n
    ot = N * n + N * m
    oa = ot + N * n
    act_rows = [(i, j) for i in range(N) for j in act[i]]
    act_rows_N = list(act_N)
    n_act = len(act_rows) + len(act_rows_N)
    dim = oa + n_act
    K = sp.lil_matrix((dim, dim))
    rhs = np.zeros(dim)

    def put(r, c, block):
        K[r : r + block.shape[0], c : c + block.shape[1]] = block

    # stationarity wrt dx_i, i = 1..N-1 and terminal
    for i in range(1, N):
        r = ox(i)
        put(r, ox(i), qp.M[i][:n, :n])
        put(r, ou + i * m, qp.M[i][:n, n:])
        put(r, ot + i * n, qp.A[i].T)  # theta_{i+1}
        put(r, ot + (i - 1) * n, -np.eye(n))  # -theta_i
        rhs[r : r + n] = -qp.q[i][:n]
    r = ox(N)
    put(r, ox(N), qp.MN)
    put(r, ot + (N - 1) * n, -np.eye(n))
    rhs[r : r + n] = -qp.qN
    # stationarity wrt du_i
    for i in range(N):
        r = ou + i * m
        if i >= 1:
            put(r, ox(i), qp.M[i][n:, :n])
        put(r, ou + i * m, qp.M[i][n:, n:])
        put(r, ot + i * n, qp.B[i].T)
        rhs[r : r + m] = -qp.q[i][n:]
    # dynamics rows (multiplier theta_{i+1})
    for i in range(N):
        r = ot + i * n
        if i >= 1:
            put(r, ox(i), qp.A[i])
        put(r, ou + i * m, qp.B[i])
        put(r, ox(i + 1), -np.eye(n))
        rhs[r : r + n] = -qp.wx[i]
    # active inequality rows
    for a, (i, j) in enumerate(act_rows):
        r = oa + a
        if i >= 1:
            put(r, ox(i), qp.Hx[i][j][None, :])
        put(r, ou + i * m, qp.Hu[i][j][None, :])
        rhs[r] = -qp.wh[i][j]
        # symmetric coupling into stationarity rows
        if i >= 1:
            K[ox(i) : ox(i) + n, r] = qp.Hx[i][j][:, None]
        K[ou + i * m : ou + (i + 1) * m, r] = qp.Hu[i][j][:, None]
    for a, j in enumerate(act_rows_N):
        r = oa + len(act_rows) + a
        put(r, ox(N), qp.HxN[j][None, :])
        rhs[r] = -qp.whN[j]
        K[ox(N) : ox(N) + n, r] = qp.HxN[j][:, None]

    try:
        lu = spla.splu(sp.csc_matrix(K))
        v = lu.solve(rhs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(v)):
        return None
    dX = np.zeros((N + 1, n))
    dX[1:] = v[:ou].reshape(N, n)
    dU = v[ou:ot].reshape(N, m)
    theta = np.zeros((N + 1, n))
    theta[1:] = v[ot:oa].reshape(N, n)
    mu = np.zeros((N, qp.n_h))
    for a, (i, j) in enumerate(act_rows):
        mu[i, j] = v[oa + a]
    mu_N = np.zeros(qp.n_hN)
    for a, j in enumerate(act_rows_N):
        mu_N[j] = v[oa + len(act_rows) + a]
    return dX, dU, theta, mu, mu_N


# ---------------------------------------------------------------------------
# main solve


def solve_qp(qp: QpData, warm: QpSolution | None = None, tols: QpTolerances = QpTolerances()) -> QpSolution:
    """Solve the stage QP; deterministic given ``(qp, warm, tols)``.

    Stage-0 rows whose input coefficients all vanish only touch the pinned
    ``dx_0 = 0``, so they are constants, not constraints.  They are removed
    before the solve (their multipliers are reported as zero): when such a
    constant sits exactly at zero — a measured state on a bound — the row has
    no strict interior and would destroy the central path.
    """
    N, n, m = qp.N, qp.n_x, qp.n_u
    n_h, n_hN = qp.n_h, qp.n_hN
    m_ineq = N * n_h + n_hN

    dead0 = np.array([], dtype=int)
    if n_h:
        dead0 = np.flatnonzero(~np.any(qp.Hu[0] != 0.0, axis=1))
    if dead0.size:
        Hx2 = qp.Hx.copy()
        wh2 = qp.wh.copy()
        Hx2[0, dead0] = 0.0
        wh2[0, dead0] = -1.0
        qp = dc_replace(qp, Hx=Hx2, wh=wh2)

    # Convergence is judged on residuals scaled by the problem data, so that
    # the achievable accuracy does not depend on the magnitude of the cost
    # gradients (stationarity rows) or the offsets (feasibility rows).
    sc_stat = 1.0 + max(
        float(np.max(np.abs(qp.q))) if qp.q.size else 0.0,
        float(np.max(np.abs(qp.qN))) if qp.qN.size else 0.0,
    )
    sc_feas = 1.0 + max(
        float(np.max(np.abs(qp.wx))) if qp.wx.size else 0.0,
        float(np.max(np.abs(qp.wh))) if qp.wh.size else 0.0,
        float(np.max(np.abs(qp.whN))) if qp.whN.size else 0.0,
    )

    def scaled_max(res: dict) -> float:
        return max(
            res["stationarity"] / sc_stat,
            res["primal"] / sc_feas,
            res["dual"] / sc_stat,
            res["complementarity"] / sc_stat,
        )

    # -- primal/dual starting point
    warm_ok = (
        warm is not None
        and warm.dX.shape == (N + 1, n)
        and warm.dU.shape == (N, m)
        and warm.theta.shape == (N + 1, n)
        and warm.mu.shape == (N, n_h)
        and warm.mu_N.shape == (n_hN,)
    )
    if warm_ok:
        dX = warm.dX.copy()
        dU = warm.dU.copy()
        theta = warm.theta.copy()
        mu = np.clip(warm.mu, 1e-4, 1e6)
        mu_N = np.clip(warm.mu_N, 1e-4, 1e6)
    else:
        dU = np.zeros((N, m))
        dX = np.zeros((N + 1, n))
        for i in range(N):
            dX[i + 1] = qp.A[i] @ dX[i] + qp.wx[i]
        theta = np.zeros((N + 1, n))
        mu = np.ones((N, n_h))
        mu_N = np.ones(n_hN)
    dX[0] = 0.0

    if m_ineq == 0:
        rL, rLN = _stationarity(qp, dX, dU, theta, mu, mu_N)
        dz_X, dz_U, dlam = _riccati(qp.M, rL, qp.A, qp.B, _dyn_residual(qp, dX, dU), qp.MN, rLN)
        dX = dX + dz_X
        dU = dU + dz_U
        theta = theta + dlam
        theta[0] = theta0_from_solution(qp, dU, theta, mu)
        sol = QpSolution(dX, dU, theta, mu, mu_N, SOLVED, 1)
        sol.residuals = kkt_residuals_qp(qp, sol)
        return sol

    g0, g0N = _ineq_values(qp, dX, dU)
    if warm_ok:
        # A warm primal that violates the inequalities needs slacks at least as
        # large as the violation, or the first centering steps blow up.
        viol0 = max(
            float(np.max(g0)) if g0.size else 0.0,
            float(np.max(g0N)) if g0N.size else 0.0,
            0.0,
        )
        s_floor = 1e-4 + viol0
    else:
        s_floor = 1.0
    s = np.maximum(-g0, s_floor)
    sN = np.maximum(-g0N, s_floor)

    def flat_gap():
        tot = float(np.sum(s * mu) + np.sum(sN * mu_N))
        return tot / m_ineq

    def newton(rL, rLN, rE, rI, rIN, rC, rCN):
        Mb = qp.M.copy()
        qb = rL.copy()
        if n_h:
            d = mu / s
            G = np.concatenate([qp.Hx, qp.Hu], axis=2)  # (N, n_h, nz)
            Mb += np.einsum("ihz,ih,ihw->izw", G, d, G)
            corr = (mu * rI - rC) / s
            qb += np.einsum("ihz,ih->iz", G, corr)
        MbN = qp.MN.copy()
        qbN = rLN.copy()
        if n_hN:
            dN = mu_N / sN
            MbN = MbN + (qp.HxN.T * dN) @ qp.HxN
            qbN = qbN + qp.HxN.T @ ((mu_N * rIN - rCN) / sN)
        dzX, dzU, dlam = _riccati(Mb, qb, qp.A, qp.B, rE, MbN, qbN)
        if n_h:
            ds = -rI - (np.einsum("ihx,ix->ih", qp.Hx, dzX[:-1]) + np.einsum("ihu,iu->ih", qp.Hu, dzU))
            dmu = (-rC - mu * ds) / s
        else:
            ds = np.zeros((N, 0))
            dmu = np.zeros((N, 0))
        dsN = -rIN - qp.HxN @ dzX[-1]
        dmuN = (-rCN - mu_N * dsN) / sN if n_hN else np.zeros(0)
        return dzX, dzU, dlam, ds, dmu, dsN, dmuN

    def max_step(v, dv):
        neg = dv < 0
        if not np.any(neg):
            return 1.0
        return min(1.0, float(np.min(-v[neg] / dv[neg])))

    status = MAX_ITER
    it = 0
    best = np.inf
    stall = 0
    while it < tols.max_iter:
        rL, rLN = _stationarity(qp, dX, dU, theta, mu, mu_N)
        rE = _dyn_residual(qp, dX, dU)
        g, gN = _ineq_values(qp, dX, dU)
        rI = g + s
        rIN = gN + sN
        comp = max(
            float(np.max(np.abs(s * mu))) if s.size else 0.0,
            float(np.max(np.abs(sN * mu_N))) if sN.size else 0.0,
        )
        stat_abs = max(
            float(np.max(np.abs(rL))),
            float(np.max(np.abs(rLN))) if rLN.size else 0.0,
        )
        feas_abs = max(
            float(np.max(np.abs(rE))),
            float(np.max(np.abs(rI))) if rI.size else 0.0,
            float(np.max(np.abs(rIN))) if rIN.size else 0.0,
        )
        res = max(stat_abs / sc_stat, feas_abs / sc_feas, comp / sc_stat)
        if res <= tols.tol:
            status = SOLVED
            break
        if res < best * 0.9:
            best = res
            stall = 0
        else:
            stall += 1
        mu_scale = max(float(np.max(mu)) if mu.size else 0.0, float(np.max(mu_N)) if mu_N.size else 0.0)
        if mu_scale > 1e10:
            # Diverging multipliers witness infeasibility only when the primal
            # residual is also stuck; on a primal-feasible iterate they mean
            # the iteration left the central path, which the polish can fix.
            if feas_abs / sc_feas > 1e-6:
                status = INFEASIBLE
            break
        if stall > 30:
            break
        gap = flat_gap()
        try:
            # predictor
            dzX, dzU, dlam, ds, dmu, dsN, dmuN = newton(rL, rLN, rE, rI, rIN, s * mu, sN * mu_N)
            a_aff = min(
                max_step(s, ds), max_step(sN, dsN), max_step(mu, dmu), max_step(mu_N, dmuN)
            )
            gap_aff = (
                float(
                    np.sum((s + a_aff * ds) * (mu + a_aff * dmu))
                    + np.sum((sN + a_aff * dsN) * (mu_N + a_aff * dmuN))
                )
                / m_ineq
            )
            sigma = min(1.0, max(0.0, gap_aff / max(gap, 1e-300))) ** 3
            # corrector
            rC = s * mu + ds * dmu - sigma * gap
            rCN = sN * mu_N + dsN * dmuN - sigma * gap
            dzX, dzU, dlam, ds, dmu, dsN, dmuN = newton(rL, rLN, rE, rI, rIN, rC, rCN)
        except np.linalg.LinAlgError:
            status = NUMERIC_ERROR
            break
        # A common primal/dual step length keeps the pairing (s_j, mu_j)
        # balanced; separate lengths let degenerate rows leave the central
        # path, after which the multiplier of a collapsed slack diverges.
        a = min(
            1.0,
            0.9995
            * min(max_step(s, ds), max_step(sN, dsN), max_step(mu, dmu), max_step(mu_N, dmuN)),
        )
        # Shorten the step until every product s_j mu_j stays above a small
        # fraction of their mean.  Products far below the mean make the next
        # Newton system divide by a collapsed slack, whose multiplier then
        # diverges on weakly-active (degenerate) rows.
        for _ in range(40):
            pr_min = np.inf
            pr_sum = 0.0
            if n_h:
                pr = (s + a * ds) * (mu + a * dmu)
                pr_min = min(pr_min, float(np.min(pr)))
                pr_sum += float(np.sum(pr))
            if n_hN:
                prN = (sN + a * dsN) * (mu_N + a * dmuN)
                pr_min = min(pr_min, float(np.min(prN)))
                pr_sum += float(np.sum(prN))
            if pr_min >= 1e-4 * (pr_sum / m_ineq):
                break
            a *= 0.7
        dX[1:] += a * dzX[1:]
        dU += a * dzU
        s += a * ds
        sN += a * dsN
        theta += a * dlam
        mu += a * dmu
        mu_N += a * dmuN
        it += 1

    theta[0] = theta0_from_solution(qp, dU, theta, mu)
    sol = QpSolution(dX, dU, theta, mu, mu_N, status, it)
    if dead0.size:
        sol.mu[0, dead0] = 0.0
    sol.residuals = kkt_residuals_qp(qp, sol)

    # Active-set polish: one equality-KKT solve on the identified active set.
    # Besides tightening a converged solution to machine precision, this
    # rescues runs where the interior-point iteration stalled close to the
    # solution (the active set is then already correct).
    if tols.polish and status != INFEASIBLE and scaled_max(sol.residuals) <= 1e4 * tols.tol:
        act = [np.flatnonzero(mu[i] > s[i]) for i in range(N)]
        act_N = np.flatnonzero(mu_N > sN)
        polished = _polish(qp, act, act_N)
        if polished is not None:
            pX, pU, pth, pmu, pmuN = polished
            pmu = np.where(pmu < -1e-9, pmu, np.maximum(pmu, 0.0))
            pmuN = np.where(pmuN < -1e-9, pmuN, np.maximum(pmuN, 0.0))
            g, gN = _ineq_values(qp, pX, pU)
            ok = True
            if np.any(pmu < 0.0) or np.any(pmuN < 0.0):
                ok = False
            if g.size and float(np.max(g)) > 1e-9:
                ok = False
            if gN.size and float(np.max(gN)) > 1e-9:
                ok = False
            if ok:
                pth[0] = theta0_from_solution(qp, pU, pth, pmu)
                cand = QpSolution(pX, pU, pth, pmu, pmuN, status, it)
                cand.residuals = kkt_residuals_qp(qp, cand)
                if scaled_max(cand.residuals) <= scaled_max(sol.residuals):
                    sol = cand
    if sol.status not in (INFEASIBLE, NUMERIC_ERROR):
        sol.status = SOLVED if scaled_max(sol.residuals) <= tols.tol else MAX_ITER
    if sol.status != SOLVED and warm_ok:
        # A failed warm start is retried once from the default starting point;
        # only the cold verdict is trusted for infeasibility.
        cold = solve_qp(qp, None, tols)
        if cold.status == SOLVED or scaled_max(cold.residuals) < scaled_max(sol.residuals):
            return cold
    return sol
