"""Closed-loop simulation driver, metric aggregation, and file emission.

The plant is the prediction model (nominal study).  Each sample solves the
OCP pinned at the measured state — either to the policy's termination
criterion ("full" mode) or with a single QP ("rti" mode) — and applies
``U[0]``.  In both modes the next sample is seeded with the time-shifted
previous solution (``shift_warm_start``).

Runs are deterministic given their config; every CSV cell except the two
trailing wall-time columns of ``trace.csv`` is reproduced byte-identically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from . import engine
from .config import ConfigError, RunConfig, save_config
from .engine import (
    ABORTED,
    AnchorContext,
    FixedIterations,
    IterationPolicy,
    KktResidual,
    SchedulingDelta,
    SolveResult,
    Trajectory,
    ZeroOrderPartition,
    cold_start,
    nlp_kkt_residual,
    rti_step,
    shift_trajectory,
    solve_ocp,
)
from .model import (
    CartPendulumParams,
    box_constraints,
    cart_pendulum,
    discretize_rk4,
    eval_dynamics,
    fn_jacobians,
    rollout,
)
from .mpcc import (
    MpccBounds,
    MpccWeights,
    Track,
    build_mpcc_ocp,
    default_start_state,
    load_track,
    oval_track,
)
from .ocp import OcpProblem, QuadraticCost, make_ocp
from .qpsolve import QpTolerances
from .sensitivity import (
    ConstantPoint,
    ExternalSequence,
    MeasuredStateLastInput,
    PreviousIterate,
    SensitivityPolicy,
    ZeroAnchors,
    gauss_legendre_rule,
    rectangular_rule,
)


# ---------------------------------------------------------------------------
# config -> problem objects


def cart_pendulum_ocp(cfg: RunConfig) -> OcpProblem:
    """Swing-up OCP: RK4-discretized cart-pendulum with box constraints."""
    c = cfg.cart_pendulum
    model = discretize_rk4(cart_pendulum(CartPendulumParams()), cfg.ocp.ts, cfg.ocp.substeps)
    Q = np.diag(c.q_diag)
    R = np.array([[c.r]])
    if c.terminal == "dare":
        A, B = fn_jacobians(model.eval_fn, [np.float64(0.0)] * 4, [np.float64(0.0)], ())
        W = scipy.linalg.solve_discrete_are(A, B, Q, R)
        W = 0.5 * (W + W.T)
    else:
        W = Q.copy()
    constraints = box_constraints(np.array(c.x_lb), np.array(c.x_ub), np.array(c.u_lb), np.array(c.u_ub))
    cost = QuadraticCost(Q=Q, R=R, W=W)
    return make_ocp(model, constraints, cost, cfg.ocp.n, np.array(c.x0))


def mpcc_ocp(cfg: RunConfig) -> tuple[OcpProblem, Track]:
    m = cfg.mpcc
    track = oval_track() if m.track == "oval" else load_track(m.track)
    weights = MpccWeights(
        q_lag=m.q_lag,
        q_contour=m.q_contour,
        q_progress=m.q_progress,
        r_torque_rate=m.r_torque_rate,
        r_steer_rate=m.r_steer_rate,
        eps_progress=m.eps_progress,
        slack_quad=m.slack_quad,
        slack_lin=m.slack_lin,
    )
    bounds = MpccBounds(
        vx_min=m.vx_min,
        vx_max=m.vx_max,
        vy_max=m.vy_max,
        omega_max=m.omega_max,
        torque_min=m.torque_min,
        torque_max=m.torque_max,
        steer_max=m.steer_max,
        torque_rate_max=m.torque_rate_max,
        steer_rate_max=m.steer_rate_max,
        progress_rate_max=m.progress_rate_max,
    )
    x0 = default_start_state(track, vx=m.start_vx)
    ocp = build_mpcc_ocp(
        track,
        N=cfg.ocp.n,
        ts=cfg.ocp.ts,
        weights=weights,
        bounds=bounds,
        x0=x0,
        margin=m.margin,
        substeps=cfg.ocp.substeps,
    )
    return ocp, track


def build_policy(cfg: RunConfig) -> tuple[IterationPolicy, bool]:
    """Translate the config into an engine policy.

    Returns ``(policy, needs_reference)``; the second flag marks optimal
    anchors, which require a converged reference solve at every sample.
    """
    p = cfg.policy
    if p.sensitivity == "linearize":
        sens = SensitivityPolicy("linearize")
    else:
        rule = rectangular_rule(p.quad_nodes) if p.quadrature == "rectangular" else gauss_legendre_rule(p.quad_nodes)
        sens = SensitivityPolicy("ftc", rule)
    anchors = {
        "zero": ZeroAnchors(),
        "constant_point": ConstantPoint(np.array(p.anchor_x), np.array(p.anchor_u)),
        "measured_state_last_input": MeasuredStateLastInput(),
        "previous_iterate": PreviousIterate(),
        "optimal": ExternalSequence(),
    }[p.anchors]
    termination = {
        "kkt_residual": KktResidual(p.term_eps),
        "scheduling_delta": SchedulingDelta(p.term_eps),
        "fixed_iterations": FixedIterations(p.term_count),
    }[p.termination]
    zero_order = ZeroOrderPartition(tuple(p.zero_order), p.zero_order_propagation) if p.zero_order else None
    policy = IterationPolicy(
        sensitivity=sens,
        anchors=anchors,
        hessian=p.hessian,
        termination=termination,
        max_outer=p.max_outer,
        zero_order=zero_order,
        qp_tols=QpTolerances(tol=p.qp_tol, polish=p.qp_polish),
    )
    return policy, p.anchors == "optimal"


def reference_policy(qp_tols: QpTolerances = QpTolerances()) -> IterationPolicy:
    """Converged baseline solve used to generate optimal anchor sequences."""
    return IterationPolicy(
        sensitivity=SensitivityPolicy("linearize"),
        anchors=PreviousIterate(),
        termination=KktResidual(1e-9),
        max_outer=100,
        qp_tols=qp_tols,
    )


def build_benchmark(cfg: RunConfig) -> OcpProblem:
    if cfg.run.benchmark == "cart_pendulum":
        return cart_pendulum_ocp(cfg)
    return mpcc_ocp(cfg)[0]


def initial_trajectory(cfg: RunConfig, ocp: OcpProblem) -> Trajectory:
    """Benchmark-appropriate first iterate.

    The contouring benchmark seeds a rolling start (hold the wheel straight,
    advance the progress coordinate at the current speed, simulate); a
    stationary tile at the start state puts the whole horizon at one progress
    value, where the corridor geometry gives the first QPs no usable descent
    direction.  The regulation benchmark keeps the plain stationary tile.
    """
    traj = cold_start(ocp)
    if cfg.run.benchmark == "mpcc":
        x0 = np.asarray(ocp.x0, dtype=float)
        traj.U[:] = np.array([0.0, 0.0, max(x0[3], 0.0), 0.0])
        traj.X[:] = rollout(ocp.model, x0, traj.U)
    return traj


def policy_label(cfg: RunConfig) -> str:
    if cfg.policy.sensitivity == "linearize":
        return "sqp"
    return f"lpv_{cfg.policy.anchors}"


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    cost: float
    violation: float
    n_it: int
    reports: list
    ratios: list


@dataclass
class RunReport:
    cfg: RunConfig
    records: list
    final_state: np.ndarray
    aborted_at: int | None

    def aggregates(self) -> dict:
        n_it = [r.n_it for r in self.records]
        ratios = [v for r in self.records for v in r.ratios]
        finals = [r.reports[-1].kkt["max"] for r in self.records if r.reports]
        return {
            "steps_completed": len(self.records),
            "status": "aborted" if self.aborted_at is not None else "ok",
            "aborted_at": self.aborted_at,
            "n_it_mean": float(np.mean(n_it)) if n_it else None,
            "dr_avg": float(np.mean(ratios)) if ratios else None,
            "r_avg": float(np.mean(finals)) if finals else None,
            "max_violation": float(max((r.violation for r in self.records), default=0.0)),
            "final_cost": float(self.records[-1].cost) if self.records else None,
            "final_state": [float(v) for v in self.final_state],
        }


def _stage_violation(ocp: OcpProblem, x: np.ndarray, u: np.ndarray) -> float:
    vals = np.array([float(v) for v in ocp.constraints.stage_fn(list(x), list(u))])
    return float(max(0.0, np.max(vals))) if vals.size else 0.0


def run_closed_loop(cfg: RunConfig) -> RunReport:
    ocp0 = build_benchmark(cfg)
    policy, needs_ref = build_policy(cfg)
    ref_pol = reference_policy(policy.qp_tols)

    x = np.asarray(ocp0.x0, dtype=float).copy()
    traj = initial_trajectory(cfg, ocp0)
    ref_traj: Trajectory | None = None
    warm = None
    ref_warm = None
    u_prev = None
    records: list[StepRecord] = []
    aborted_at = None

    for k in range(cfg.run.steps):
        ocp_k = replace(ocp0, x0=x.copy())
        traj_k = traj.copy()
        traj_k.X[0] = x
        ctx = AnchorContext(k=k, x_meas=x, u_prev=u_prev)

        if needs_ref:
            seed = ref_traj.copy() if ref_traj is not None else initial_trajectory(cfg, ocp_k)
            seed.X[0] = x
            res_ref = solve_ocp(ocp_k, ref_pol, seed, ctx, ref_warm)
            if res_ref.status == ABORTED:
                aborted_at = k
                break
            ref_traj, ref_warm = res_ref.trajectory, res_ref.warm
            traj_k = ref_traj.copy()
            ctx = replace(ctx, optimal_ref=ref_traj)

        if cfg.run.mode == "full":
            res = solve_ocp(ocp_k, policy, traj_k, ctx, warm)
            if res.status == ABORTED:
                aborted_at = k
                break
            traj, warm = res.trajectory, res.warm
            reports, ratios = res.reports, res.r_ratios
            u = traj.U[0].copy()
            if cfg.run.shift_warm_start:
                # Seed the next sample with the time-shifted solution so the
                # seed is aligned with the advanced horizon; an unshifted seed
                # is one stage stale, which the zero-order reduction in
                # particular cannot absorb (its frozen coordinates enter the
                # QP as immovable offsets).
                traj = shift_trajectory(traj)
        else:
            r_before = nlp_kkt_residual(ocp_k, traj_k)["max"]
            try:
                u, new_traj, rep, warm = rti_step(ocp0, traj_k, policy, x, ctx, warm)
            except engine.QpFailure:
                aborted_at = k
                break
            reports = [rep]
            ratios = [rep.kkt["max"] / r_before] if r_before > 0.0 else []
            traj = shift_trajectory(new_traj) if cfg.run.shift_warm_start else new_traj

        records.append(
            StepRecord(
                k=k,
                x=x.copy(),
                u=u.copy(),
                cost=reports[-1].cost,
                violation=_stage_violation(ocp0, x, u),
                n_it=len(reports),
                reports=reports,
                ratios=ratios,
            )
        )
        u_prev = u.copy()
        x = eval_dynamics(ocp0.model, x, u)

    return RunReport(cfg=cfg, records=records, final_state=x, aborted_at=aborted_at)


def solve_first_ocp(cfg: RunConfig) -> SolveResult:
    """Solve the sample-0 OCP only (residual-vs-iteration studies)."""
    ocp0 = build_benchmark(cfg)
    policy, needs_ref = build_policy(cfg)
    traj = initial_trajectory(cfg, ocp0)
    ctx = AnchorContext(k=0, x_meas=np.asarray(ocp0.x0, dtype=float))
    if needs_ref:
        res_ref = solve_ocp(ocp0, reference_policy(policy.qp_tols), initial_trajectory(cfg, ocp0), ctx)
        ctx = replace(ctx, optimal_ref=res_ref.trajectory)
        traj = res_ref.trajectory.copy()
    return solve_ocp(ocp0, policy, traj, ctx)


# ---------------------------------------------------------------------------
# policy comparison


@dataclass
class Comparison:
    labels: list
    reports: list
    per_step: np.ndarray  # (steps, n_policies) iteration counts

    def aggregates(self) -> dict:
        return {label: rep.aggregates() for label, rep in zip(self.labels, self.reports)}


def compare_policies(cfgs: list[RunConfig]) -> Comparison:
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    first = cfgs[0]
    for c in cfgs[1:]:
        if c.run.benchmark != first.run.benchmark:
            raise ConfigError("compare: all configs must use the same benchmark")
        if c.run.steps != first.run.steps or c.run.mode != first.run.mode:
            raise ConfigError("compare: all configs must share rollout length and mode")
    labels = []
    for c in cfgs:
        base = policy_label(c)
        label = base
        i = 2
        while label in labels:
            label = f"{base}_{i}"
            i += 1
        labels.append(label)
    reports = [run_closed_loop(c) for c in cfgs]
    steps = max((len(r.records) for r in reports), default=0)
    per_step = np.zeros((steps, len(cfgs)), dtype=int)
    for j, rep in enumerate(reports):
        for rec in rep.records:
            per_step[rec.k, j] = rec.n_it
    return Comparison(labels=labels, reports=reports, per_step=per_step)


# ---------------------------------------------------------------------------
# file emission


def _wf(v: float) -> str:
    return repr(float(v))


def write_report(report: RunReport, out_dir) -> list:
    """Emit trace/rollout/summary/figure files; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    paths = []

    trace = out / "trace.csv"
    with open(trace, "w") as fh:
        fh.write("k,iter,kkt_stat,kkt_feas,kkt_comp,kkt_max,sched_delta,step_norm,qp_iters,t_prep_us,t_fb_us\n")
        for rec in report.records:
            for rep in rec.reports:
                fh.write(
                    f"{rec.k},{rep.iter_index},{_wf(rep.kkt['stationarity'])},{_wf(rep.kkt['feasibility'])},"
                    f"{_wf(rep.kkt['complementarity'])},{_wf(rep.kkt['max'])},{_wf(rep.sched_delta)},"
                    f"{_wf(rep.step_norm)},{rep.qp_iters},{rep.t_prep_us:.1f},{rep.t_fb_us:.1f}\n"
                )
    paths.append(trace)

    n_x = report.final_state.shape[0]
    n_u = report.records[0].u.shape[0] if report.records else 0
    rollout = out / "rollout.csv"
    with open(rollout, "w") as fh:
        xcols = ",".join(f"x{i}" for i in range(n_x))
        ucols = ",".join(f"u{i}" for i in range(n_u))
        cols = ",".join(c for c in ("k", xcols, ucols, "cost,violation,n_it") if c)
        fh.write(cols + "\n")
        for rec in report.records:
            xs = ",".join(_wf(v) for v in rec.x)
            us = ",".join(_wf(v) for v in rec.u)
            row = ",".join(c for c in (str(rec.k), xs, us, f"{_wf(rec.cost)},{_wf(rec.violation)},{rec.n_it}") if c)
            fh.write(row + "\n")
    paths.append(rollout)

    fig1 = out / "fig1_data.csv"
    with open(fig1, "w") as fh:
        fh.write("iter,kkt_stat,kkt_feas,kkt_comp,kkt_max\n")
        if report.records:
            for rep in report.records[0].reports:
                fh.write(
                    f"{rep.iter_index},{_wf(rep.kkt['stationarity'])},{_wf(rep.kkt['feasibility'])},"
                    f"{_wf(rep.kkt['complementarity'])},{_wf(rep.kkt['max'])}\n"
                )
    paths.append(fig1)

    fig2 = out / "fig2_data.csv"
    with open(fig2, "w") as fh:
        fh.write("k,n_it\n")
        for rec in report.records:
            fh.write(f"{rec.k},{rec.n_it}\n")
    paths.append(fig2)

    summary = out / "summary.json"
    payload = {"benchmark": report.cfg.run.benchmark, "mode": report.cfg.run.mode, **report.aggregates()}
    with open(summary, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(summary)

    resolved = out / "config_resolved.ini"
    save_config(report.cfg, resolved)
    paths.append(resolved)
    return paths


def write_comparison(cmp_: Comparison, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    table = out / "compare.csv"
    with open(table, "w") as fh:
        fh.write("k," + ",".join(f"n_it_{label}" for label in cmp_.labels) + "\n")
        for k in range(cmp_.per_step.shape[0]):
            fh.write(f"{k}," + ",".join(str(v) for v in cmp_.per_step[k]) + "\n")
    paths.append(table)
    agg = out / "compare_summary.json"
    with open(agg, "w") as fh:
        json.dump(cmp_.aggregates(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(agg)
    for label, rep in zip(cmp_.labels, cmp_.reports):
        paths += write_report(rep, out / label)
    return paths


def read_rollout(path) -> dict:
    """Parse ``rollout.csv`` back into arrays (round-trip checks)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    nx = sum(1 for h in header if h.startswith("x"))
    nu = sum(1 for h in header if h.startswith("u"))
    return {
        "k": cols["k"].astype(int) if rows else np.zeros(0, dtype=int),
        "X": np.column_stack([cols[f"x{i}"] for i in range(nx)]) if rows and nx else np.zeros((len(rows), nx)),
        "U": np.column_stack([cols[f"u{i}"] for i in range(nu)]) if rows and nu else np.zeros((len(rows), nu)),
        "cost": cols.get("cost", np.zeros(0)),
        "violation": cols.get("violation", np.zeros(0)),
        "n_it": cols["n_it"].astype(int) if rows else np.zeros(0, dtype=int),
    }
