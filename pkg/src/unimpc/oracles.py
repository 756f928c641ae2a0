"""Independent reference implementations for cross-checking the solver.

These deliberately avoid the production code paths: the QP oracle builds the
dense KKT system and enumerates active sets; derivative oracles use central
finite differences; the quadrature oracle integrates Jacobians with a dense
midpoint rule.  ``selftest`` runs all three suites on deterministic random
instances and reports pass/fail per suite.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from . import autodiff as ad
from .model import DynamicsModel, cart_pendulum, discretize_rk4, eval_dynamics, single_track
from .ocp import QpData

# ---------------------------------------------------------------------------
# dense QP oracle


def dense_qp_matrices(qp: QpData):
    """Stack the stage QP into dense ``(H, g, Aeq, beq, G, h)``.

    Variable order: ``x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N``.
    Equalities: pinned ``x_0 = 0`` then the dynamics rows; inequalities
    ``G v <= h`` collect the stage rows then the terminal rows.
    """
    N, n, m = qp.N, qp.n_x, qp.n_u
    nz = n + m
    dim = N * nz + n
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for i in range(N):
        H[i * nz : (i + 1) * nz, i * nz : (i + 1) * nz] = qp.M[i]
        g[i * nz : (i + 1) * nz] = qp.q[i]
    H[N * nz :, N * nz :] = qp.MN
    g[N * nz :] = qp.qN

    Aeq = np.zeros((n + N * n, dim))
    beq = np.zeros(n + N * n)
    Aeq[:n, :n] = np.eye(n)
    for i in range(N):
        r = n + i * n
        Aeq[r : r + n, i * nz : i * nz + n] = qp.A[i]
        Aeq[r : r + n, i * nz + n : (i + 1) * nz] = qp.B[i]
        Aeq[r : r + n, (i + 1) * nz : (i + 1) * nz + n] = -np.eye(n)
        beq[r : r + n] = -qp.wx[i]

    rows = []
    rhs = []
    for i in range(N):
        for j in range(qp.n_h):
            row = np.zeros(dim)
            row[i * nz : i * nz + n] = qp.Hx[i, j]
            row[i * nz + n : (i + 1) * nz] = qp.Hu[i, j]
            rows.append(row)
            rhs.append(-qp.wh[i, j])
    for j in range(qp.n_hN):
        row = np.zeros(dim)
        row[N * nz :] = qp.HxN[j]
        rows.append(row)
        rhs.append(-qp.whN[j])
    G = np.vstack(rows) if rows else np.zeros((0, dim))
    h = np.array(rhs)
    return H, g, Aeq, beq, G, h


def solve_dense_qp_enumeration(H, g, Aeq, beq, G, h, feas_tol=1e-9, dual_tol=1e-9):
    """Global solve of a convex QP by active-set enumeration (small only).

    Tries active sets in order of size; the first KKT-consistent one is the
    optimum (convexity).  Returns ``(v, mu)`` with dense multipliers for the
    inequality rows.  Raises if no consistent set exists (infeasible data).
    """
    n_ineq = G.shape[0]
    if n_ineq > 16:
        raise ValueError("enumeration oracle limited to <= 16 inequality rows")
    dim = H.shape[0]
    ne = Aeq.shape[0]
    for size in range(n_ineq + 1):
        for act in combinations(range(n_ineq), size):
            Ga = G[list(act)]
            k = ne + len(act)
            K = np.zeros((dim + k, dim + k))
            K[:dim, :dim] = H
            K[:dim, dim : dim + ne] = Aeq.T
            K[dim : dim + ne, :dim] = Aeq
            K[:dim, dim + ne :] = Ga.T
            K[dim + ne :, :dim] = Ga
            rhs = np.concatenate([-g, beq, h[list(act)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            v = sol[:dim]
            mu_act = sol[dim + ne :]
            if np.any(mu_act < -dual_tol):
                continue
            inact = [j for j in range(n_ineq) if j not in act]
            if inact and np.any(G[inact] @ v - h[inact] > feas_tol):
                continue
            mu = np.zeros(n_ineq)
            mu[list(act)] = np.maximum(mu_act, 0.0)
            return v, mu
    raise ValueError("no KKT-consistent active set found (QP may be infeasible)")


def oracle_solve_qp(qp: QpData):
    """Reference solution ``(dX, dU)`` of a stage QP via dense enumeration."""
    H, g, Aeq, beq, G, h = dense_qp_matrices(qp)
    v, _ = solve_dense_qp_enumeration(H, g, Aeq, beq, G, h)
    N, n, m = qp.N, qp.n_x, qp.n_u
    nz = n + m
    dX = np.zeros((N + 1, n))
    dU = np.zeros((N, m))
    for i in range(N):
        dX[i] = v[i * nz : i * nz + n]
        dU[i] = v[i * nz + n : (i + 1) * nz]
    dX[N] = v[N * nz :]
    return dX, dU


# ---------------------------------------------------------------------------
# finite differences


def fd_jacobian(F, x, h=1e-6):
    """Central-difference Jacobian of vector map ``F`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(F(x), dtype=float)
    J = np.zeros((f0.shape[0], x.shape[0]))
    for j in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.asarray(F(xp)) - np.asarray(F(xm))) / (2 * h)
    return J


def fd_hessian(f, x, h=1e-4):
    """Central-difference Hessian of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    Hm = np.zeros((d, d))

    def at(dx):
        return float(f(x + dx))

    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h
            ej[j] = h
            val = (at(ei + ej) - at(ei - ej) - at(-ei + ej) + at(-ei - ej)) / (4 * h * h)
            Hm[i, j] = Hm[j, i] = val
    return Hm


def fd_model_jacobians(model: DynamicsModel, x, u, h=1e-6):
    """Finite-difference ``(A, B)`` of a model at one state/input pair."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.shape[0]

    def F(v):
        return eval_dynamics(model, v[:n], v[n:])

    J = fd_jacobian(F, np.concatenate([x, u]), h)
    return J[:, :n], J[:, n:]


def oracle_nlp_kkt(ocp, traj, h=1e-6) -> dict:
    """NLP KKT residual recomputed with finite-difference derivatives."""
    N = ocp.N
    n, m = ocp.model.n_x, ocp.model.n_u
    cs = ocp.constraints

    def stage_h(x, u):
        return np.array([float(v) for v in cs.stage_fn(list(x), list(u))]) if cs.n_h else np.zeros(0)

    def term_h(x):
        return np.array([float(v) for v in cs.terminal_fn(list(x))]) if cs.n_hN else np.zeros(0)

    from .ocp import QuadraticCost

    def stage_cost(x, u):
        if isinstance(ocp.cost, QuadraticCost):
            return 0.5 * (x @ ocp.cost.Q @ x + u @ ocp.cost.R @ u)
        y = np.array([float(v) for v in ocp.cost.outputs.eval_fn(list(x))])
        ua = np.concatenate([u, [1.0]])
        return 0.5 * (y @ ocp.cost.Qy @ y + ua @ ocp.cost.Raug @ ua)

    def term_cost(x):
        if isinstance(ocp.cost, QuadraticCost):
            return 0.5 * x @ ocp.cost.W @ x
        y = np.array([float(v) for v in ocp.cost.outputs.eval_fn(list(x))])
        return 0.5 * y @ ocp.cost.Qy @ y

    stat = 0.0
    feas = float(np.max(np.abs(traj.X[0] - np.asarray(ocp.x0, dtype=float))))
    comp = 0.0
    for i in range(N):
        x, u = traj.X[i], traj.U[i]
        th = traj.theta[i + 1]
        mu = traj.mu[i]

        def lag(v):
            xx, uu = v[:n], v[n:]
            val = stage_cost(xx, uu) + th @ eval_dynamics(ocp.model, xx, uu)
            if cs.n_h:
                val += mu @ stage_h(xx, uu)
            return val

        grad = fd_jacobian(lambda v: np.array([lag(v)]), np.concatenate([x, u]), h)[0]
        gx = grad[:n] - (traj.theta[i] if i >= 1 else np.zeros(n))
        gu = grad[n:]
        if i >= 1:
            stat = max(stat, float(np.max(np.abs(gx))))
        stat = max(stat, float(np.max(np.abs(gu))))
        defect = eval_dynamics(ocp.model, x, u) - traj.X[i + 1]
        feas = max(feas, float(np.max(np.abs(defect))))
        hv = stage_h(x, u)
        if hv.size:
            feas = max(feas, float(np.max(hv)), float(np.max(-mu)))
            comp = max(comp, float(np.max(np.abs(mu * hv))))

    def lagN(x):
        val = term_cost(x)
        if cs.n_hN:
            val += traj.mu_N @ term_h(x)
        return val

    gN = fd_jacobian(lambda v: np.array([lagN(v)]), traj.X[N], h)[0] - traj.theta[N]
    stat = max(stat, float(np.max(np.abs(gN))))
    hN = term_h(traj.X[N])
    if hN.size:
        feas = max(feas, float(np.max(hN)), float(np.max(-traj.mu_N)))
        comp = max(comp, float(np.max(np.abs(traj.mu_N * hN))))
    return {"stationarity": stat, "feasibility": feas, "complementarity": comp, "max": max(stat, feas, comp)}


# ---------------------------------------------------------------------------
# dense quadrature oracle


def dense_integrated_jacobians(fn, n_out, x, u, xa, ua, n_nodes=10_000, chunk=500):
    """Midpoint-rule average of the Jacobians of ``fn`` along an anchor segment.

    ``fn(xc, uc)`` maps component sequences to ``n_out`` outputs.  Points are
    ``anchor + lambda * (point - anchor)`` at midpoint nodes; returns the
    averaged ``(Jx, Ju)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xa = np.asarray(xa, dtype=float)
    ua = np.asarray(ua, dtype=float)
    n, m = x.shape[0], u.shape[0]
    Jx = np.zeros((n_out, n))
    Ju = np.zeros((n_out, m))
    done = 0
    while done < n_nodes:
        c = min(chunk, n_nodes - done)
        lam = (np.arange(done, done + c) + 0.5) / n_nodes
        xs = xa[None, :] + lam[:, None] * (x - xa)[None, :]
        us = ua[None, :] + lam[:, None] * (u - ua)[None, :]
        comps = ad.seed([xs[:, j] for j in range(n)] + [us[:, j] for j in range(m)], 0, n + m)
        outs = fn(comps[:n], comps[n:])
        J = ad.jacobian(outs, n + m, (c,))  # (c, n_out, n+m)
        Jx += np.sum(J[:, :, :n], axis=0)
        Ju += np.sum(J[:, :, n:], axis=0)
        done += c
    return Jx / n_nodes, Ju / n_nodes


# ---------------------------------------------------------------------------
# selftest suites


def _random_qp(rng: np.random.Generator) -> QpData:
    N = int(rng.integers(1, 4))
    n = int(rng.integers(1, 4))
    m = int(rng.integers(1, 3))
    n_h = int(rng.integers(1, 4))
    n_hN = int(rng.integers(0, 2))
    nz = n + m

    def pd(k):
        L = rng.normal(size=(k, k)) * 0.6
        return L @ L.T + np.eye(k) * (0.2 + rng.random())

    M = np.stack([pd(nz) for _ in range(N)])
    MN = pd(n)
    q = rng.normal(size=(N, nz))
    qN = rng.normal(size=n)
    A = rng.normal(size=(N, n, n)) * 0.5
    B = rng.normal(size=(N, n, m)) * 0.5
    wx = rng.normal(size=(N, n)) * 0.3
    Hx = rng.normal(size=(N, n_h, n))
    Hu = rng.normal(size=(N, n_h, m))
    HxN = rng.normal(size=(n_hN, n))
    # guarantee feasibility: make a random dynamics-consistent point interior
    dU = rng.normal(size=(N, m)) * 0.3
    dX = np.zeros((N + 1, n))
    for i in range(N):
        dX[i + 1] = A[i] @ dX[i] + B[i] @ dU[i] + wx[i]
    slackv = rng.random(size=(N, n_h)) * 0.5
    slackv[rng.random(size=(N, n_h)) < 0.3] = 0.0
    wh = -(np.einsum("ihx,ix->ih", Hx, dX[:N]) + np.einsum("ihu,iu->ih", Hu, dU)) - slackv
    sN = rng.random(size=n_hN) * 0.5
    whN = -(HxN @ dX[N]) - sN
    return QpData(
        n_x=n, n_u=m, N=N, M=M, q=q, A=A, B=B, wx=wx, Hx=Hx, Hu=Hu, wh=wh,
        MN=MN, qN=qN, HxN=HxN, whN=whN, reg_count=0,
    )


def suite_qp_oracle(n_instances=24, tol=1e-8, verbose=True) -> bool:
    from .qpsolve import solve_qp

    rng = np.random.default_rng(20240211)
    worst = 0.0
    for _ in range(n_instances):
        qp = _random_qp(rng)
        sol = solve_qp(qp)
        if sol.status != "solved":
            if verbose:
                print(f"qp-oracle: FAIL (solver status {sol.status})")
            return False
        dX_ref, dU_ref = oracle_solve_qp(qp)
        err = max(float(np.max(np.abs(sol.dX - dX_ref))), float(np.max(np.abs(sol.dU - dU_ref))))
        worst = max(worst, err)
    ok = worst <= tol
    if verbose:
        print(f"qp-oracle: {'ok' if ok else 'FAIL'} ({n_instances} instances, worst |err| = {worst:.2e})")
    return ok


def suite_derivatives(tol=1e-5, verbose=True) -> bool:
    from .model import fn_jacobians

    rng = np.random.default_rng(7)
    worst = 0.0
    models = [cart_pendulum(), single_track()]
    for model in models:
        for _ in range(4):
            x = rng.normal(size=model.n_x) * 0.5
            u = rng.normal(size=model.n_u) * 0.5
            if model.n_x == 9:
                x[3] = 1.0 + 0.5 * rng.random()  # forward speed bounded away from zero
            Ax, Bx = fn_jacobians(model.eval_fn, list(x.astype(np.float64)), list(u.astype(np.float64)), ())
            Af, Bf = fd_model_jacobians(model, x, u)
            scale = 1.0 + max(np.max(np.abs(Af)), np.max(np.abs(Bf)))
            worst = max(worst, np.max(np.abs(Ax - Af)) / scale, np.max(np.abs(Bx - Bf)) / scale)
    # second order: Hessian of a Lagrangian-like scalar of the pendulum step
    disc = discretize_rk4(cart_pendulum(), 0.01)
    th = rng.normal(size=4)

    def scal(v):
        out = disc.eval_fn(list(v[:4]), list(v[4:]))
        acc = 0.0
        for t, o in zip(th, out):
            acc = acc + t * o
        return acc

    pt = list(rng.normal(size=5).astype(np.float64))
    Hx = ad.hessian(scal, pt)
    Hf = fd_hessian(lambda v: ad.value(scal(list(v))), np.array(pt))
    worst2 = float(np.max(np.abs(Hx - Hf)) / (1.0 + np.max(np.abs(Hf))))
    ok = worst <= tol and worst2 <= 1e-4
    if verbose:
        print(f"derivatives: {'ok' if ok else 'FAIL'} (jacobian rel err {worst:.2e}, hessian rel err {worst2:.2e})")
    return ok


def suite_quadrature(tol=1e-8, verbose=True) -> bool:
    from .sensitivity import ftc_stage, gauss_legendre_rule

    disc = discretize_rk4(cart_pendulum(), 0.01)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(3):
        x = rng.normal(size=4) * 0.8
        u = rng.normal(size=1) * 2.0
        xa = rng.normal(size=4) * 0.8
        ua = rng.normal(size=1) * 2.0
        x_next = eval_dynamics(disc, x, u)
        st = ftc_stage(disc, None, x, u, x_next, xa, ua, gauss_legendre_rule(32))
        Ar, Br = dense_integrated_jacobians(disc.eval_fn, 4, x, u, xa, ua, n_nodes=10_000)
        worst = max(worst, float(np.max(np.abs(st.A - Ar))), float(np.max(np.abs(st.B - Br))))
    ok = worst <= tol
    if verbose:
        print(f"quadrature: {'ok' if ok else 'FAIL'} (worst |err| = {worst:.2e})")
    return ok


def selftest(verbose=True) -> int:
    """Run all oracle suites; returns a process exit code (0 = pass)."""
    ok = True
    ok &= suite_derivatives(verbose=verbose)
    ok &= suite_quadrature(verbose=verbose)
    ok &= suite_qp_oracle(verbose=verbose)
    if verbose:
        print("selftest:", "ok" if ok else "FAIL")
    return 0 if ok else 1
