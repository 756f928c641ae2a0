"""Shared builders for the test suite.

The helpers construct small, fast problem instances:

* a discrete double integrator with dyadic (power-of-two) coefficients, so
  linear-algebra identities can be checked in exact float arithmetic;
* a three-state toy whose trailing two states form a partition that is linear
  in itself (for the zero-order decoupling checks);
* config builders that apply per-section overrides to the shipped defaults.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from unimpc.config import default_config, resolve_config
from unimpc.model import DynamicsModel, box_constraints
from unimpc.ocp import QuadraticCost, make_ocp


def double_integrator(ts: float = 0.125) -> DynamicsModel:
    """Discrete double integrator; all coefficients are dyadic for ts=0.125."""

    def fn(xc, uc):
        p, v = xc
        (a,) = uc
        return [p + ts * v + (0.5 * ts * ts) * a, v + ts * a]

    return DynamicsModel("double_integrator", 2, 1, False, fn)


def double_integrator_ocp(N: int = 8, x0=(1.5, 0.0), u_max: float = 1.0):
    model = double_integrator()
    cons = box_constraints(
        np.array([-4.0, -2.0]),
        np.array([4.0, 2.0]),
        np.array([-u_max]),
        np.array([u_max]),
    )
    cost = QuadraticCost(Q=np.diag([2.0, 1.0]), R=np.array([[0.5]]), W=np.diag([4.0, 2.0]))
    return make_ocp(model, cons, cost, N, np.array(x0, dtype=float))


def zpart_model() -> DynamicsModel:
    """Three-state toy whose states 1..2 are linear in themselves.

    All coefficients are powers of two, so a rollout of the (1, 2) partition
    is exact float arithmetic and the linear and nonlinear propagation modes
    must agree bitwise.  The partition's rows depend on the remaining state
    and on the input (those couplings are what the decoupling discards).
    """

    def fn(xc, uc):
        y, z1, z2 = xc
        (a,) = uc
        return [
            0.5 * y + 0.25 * z1 + 0.5 * a,
            0.25 * y + 0.5 * z1 + 0.25 * z2 + 0.5 * a,
            0.25 * z1 + 0.5 * z2 + 0.125,
        ]

    return DynamicsModel("zpart_toy", 3, 1, False, fn)


def zpart_ocp(N: int = 6):
    model = zpart_model()
    cons = box_constraints(
        np.full(3, -np.inf),
        np.full(3, np.inf),
        np.array([-2.0]),
        np.array([2.0]),
    )
    cost = QuadraticCost(Q=np.eye(3), R=np.array([[1.0]]), W=2.0 * np.eye(3))
    return make_ocp(model, cons, cost, N, np.array([1.0, 0.5, -0.75]))


def cart_cfg(run=None, ocp=None, policy=None, cart=None):
    """Cart-pendulum config with per-section override dictionaries."""
    cfg = default_config("cart_pendulum")
    if run:
        cfg = replace(cfg, run=replace(cfg.run, **run))
    if ocp:
        cfg = replace(cfg, ocp=replace(cfg.ocp, **ocp))
    if policy:
        cfg = replace(cfg, policy=replace(cfg.policy, **policy))
    if cart:
        cfg = replace(cfg, cart_pendulum=replace(cfg.cart_pendulum, **cart))
    return resolve_config(cfg)


def mpcc_cfg(run=None, ocp=None, policy=None, mpcc=None):
    """Contouring-benchmark config with per-section override dictionaries."""
    cfg = default_config("mpcc")
    if run:
        cfg = replace(cfg, run=replace(cfg.run, **run))
    if ocp:
        cfg = replace(cfg, ocp=replace(cfg.ocp, **ocp))
    if policy:
        cfg = replace(cfg, policy=replace(cfg.policy, **policy))
    if mpcc:
        cfg = replace(cfg, mpcc=replace(cfg.mpcc, **mpcc))
    return resolve_config(cfg)


def trace_fields(rep) -> list:
    """Numeric per-iteration trace entries compared between twin solvers."""
    return [
        rep.kkt["stationarity"],
        rep.kkt["feasibility"],
        rep.kkt["complementarity"],
        rep.kkt["max"],
        rep.sched_delta,
        rep.step_norm,
        rep.cost,
        rep.violation,
    ]


def max_trace_diff(reports_a, reports_b) -> float:
    assert len(reports_a) == len(reports_b), "traces have different lengths"
    return max(
        (
            abs(x - y)
            for ra, rb in zip(reports_a, reports_b)
            for x, y in zip(trace_fields(ra), trace_fields(rb))
        ),
        default=0.0,
    )
