"""OCP container, cost evaluation, and stage-QP assembly."""
import numpy as np
import pytest

from conftest import double_integrator, double_integrator_ocp
from unimpc.engine import Trajectory, cold_start
from unimpc.model import (
    DimensionError,
    DynamicsModel,
    OutputMap,
    box_constraints,
    cart_pendulum,
    discretize_rk4,
    rollout,
)
from unimpc.ocp import (
    EXACT_LAGRANGIAN,
    GAUSS_NEWTON,
    OutputQuadraticCost,
    QuadraticCost,
    assemble_qp,
    cost_gradients,
    eval_constraints,
    eval_nlp_cost,
    make_ocp,
    regularize,
)
from unimpc.oracles import fd_jacobian
from unimpc.sensitivity import SensitivityPolicy, linearize_trajectory, rectangular_rule

LIN = SensitivityPolicy("linearize")


def output_cost_ocp(N=4):
    """Small 3-state OCP with a nonlinear output cost (progress-style Raug)."""
    model = DynamicsModel(
        "toy3",
        3,
        1,
        False,
        lambda xc, uc: [xc[0] + 0.1 * xc[1], xc[1] + 0.1 * uc[0], xc[2] + 0.05 * xc[0]],
    )
    outputs = OutputMap(2, lambda xc: [np.sin(xc[0]) + xc[2], xc[1] * xc[2]])
    Qy = np.diag([2.0, 1.0])
    Raug = np.array([[0.5, 0.1], [0.1, 0.0]])
    cons = box_constraints(
        np.full(3, -np.inf), np.full(3, np.inf), np.array([-2.0]), np.array([2.0])
    )
    cost = OutputQuadraticCost(outputs, Qy, Raug)
    return make_ocp(model, cons, cost, N, np.array([0.4, -0.3, 0.8]))


# ---------------------------------------------------------------------------
# validation


def test_make_ocp_rejects_bad_inputs():
    good = double_integrator_ocp()
    m, cons, cost = good.model, good.constraints, good.cost
    with pytest.raises(DimensionError):
        make_ocp(cart_pendulum(), cons, cost, 4, good.x0)  # continuous model
    with pytest.raises(DimensionError):
        make_ocp(m, cons, cost, 0, good.x0)
    with pytest.raises(DimensionError):
        make_ocp(m, cons, cost, 4, np.zeros(3))
    with pytest.raises(DimensionError):
        make_ocp(m, cons, QuadraticCost(np.array([[1.0, 0.5], [0.0, 1.0]]), cost.R, cost.W), 4, good.x0)
    with pytest.raises(DimensionError):
        make_ocp(m, cons, QuadraticCost(np.diag([1.0, -0.5]), cost.R, cost.W), 4, good.x0)
    with pytest.raises(DimensionError):
        make_ocp(m, cons, QuadraticCost(cost.Q, np.zeros((1, 1)), cost.W), 4, good.x0)  # R not PD
    with pytest.raises(DimensionError):
        make_ocp(m, cons, QuadraticCost(np.eye(3), np.eye(1), np.eye(3)), 4, good.x0)


def test_make_ocp_output_cost_validation():
    ocp = output_cost_ocp()
    c = ocp.cost
    with pytest.raises(DimensionError):
        make_ocp(ocp.model, ocp.constraints, OutputQuadraticCost(c.outputs, c.Qy, np.zeros((2, 2))), 4, ocp.x0)
    with pytest.raises(DimensionError):
        make_ocp(ocp.model, ocp.constraints, OutputQuadraticCost(c.outputs, c.Qy, np.eye(3)), 4, ocp.x0)
    with pytest.raises(DimensionError):
        make_ocp(ocp.model, ocp.constraints, OutputQuadraticCost(c.outputs, np.eye(3), c.Raug), 4, ocp.x0)


# ---------------------------------------------------------------------------
# cost evaluation


def test_nlp_cost_matches_hand_formula():
    ocp = double_integrator_ocp(N=3)
    rng = np.random.default_rng(5)
    U = rng.normal(size=(3, 1))
    X = rollout(ocp.model, ocp.x0, U)
    expected = sum(X[i] @ ocp.Q @ X[i] + U[i] @ ocp.R @ U[i] for i in range(3))
    expected += X[3] @ ocp.W @ X[3]
    assert eval_nlp_cost(ocp, X, U) == pytest.approx(float(expected), rel=1e-14)
    with pytest.raises(DimensionError):
        eval_nlp_cost(ocp, X[:-1], U)


def test_output_cost_matches_hand_formula():
    ocp = output_cost_ocp(N=2)
    rng = np.random.default_rng(6)
    U = rng.normal(size=(2, 1))
    X = rollout(ocp.model, ocp.x0, U)
    c = ocp.cost
    y = lambda x: np.array([np.sin(x[0]) + x[2], x[1] * x[2]])
    expected = sum(y(X[i]) @ c.Qy @ y(X[i]) for i in range(3))
    for i in range(2):
        ue = np.array([U[i, 0], 1.0])
        expected += ue @ c.Raug @ ue
    assert eval_nlp_cost(ocp, X, U) == pytest.approx(float(expected), rel=1e-13)


def test_cost_gradients_are_half_scaled_quadratic():
    ocp = double_integrator_ocp(N=4)
    rng = np.random.default_rng(7)
    U = rng.normal(size=(4, 1))
    X = rollout(ocp.model, ocp.x0, U)
    gx, gu, gxN = cost_gradients(ocp, X, U)
    for i in range(4):
        gx_fd = fd_jacobian(
            lambda v: np.array([0.5 * (v @ ocp.Q @ v)]), X[i]
        )[0]
        assert np.max(np.abs(gx[i] - gx_fd)) < 1e-7
        assert gu[i, 0] == pytest.approx(float(ocp.R[0, 0] * U[i, 0]), abs=1e-14)
    gxN_fd = fd_jacobian(lambda v: np.array([0.5 * (v @ ocp.W @ v)]), X[4])[0]
    assert np.max(np.abs(gxN - gxN_fd)) < 1e-7


def test_output_cost_gradients_match_finite_differences():
    ocp = output_cost_ocp(N=3)
    rng = np.random.default_rng(8)
    U = rng.normal(size=(3, 1))
    X = rollout(ocp.model, ocp.x0, U)
    T = linearize_trajectory(ocp.model, ocp.constraints, X, U, ocp.cost.outputs)
    gx, gu, gxN = cost_gradients(ocp, X, U, T.C, T.y, T.CN, T.yN)
    c = ocp.cost
    y = lambda x: np.array([np.sin(x[0]) + x[2], x[1] * x[2]])
    for i in range(3):
        gfd = fd_jacobian(lambda v: np.array([0.5 * (y(v) @ c.Qy @ y(v))]), X[i])[0]
        assert np.max(np.abs(gx[i] - gfd)) < 1e-7
        ufd = fd_jacobian(
            lambda v: np.array([0.5 * (np.array([v[0], 1.0]) @ c.Raug @ np.array([v[0], 1.0]))]),
            U[i],
        )[0]
        assert np.max(np.abs(gu[i] - ufd)) < 1e-7
    gNfd = fd_jacobian(lambda v: np.array([0.5 * (y(v) @ c.Qy @ y(v))]), X[3])[0]
    assert np.max(np.abs(gxN - gNfd)) < 1e-7
    with pytest.raises(DimensionError):
        cost_gradients(ocp, X, U)  # output cost needs sensitivities


def test_eval_constraints_violation():
    ocp = double_integrator_ocp(N=2, u_max=1.0)
    X = np.tile(ocp.x0, (3, 1))
    U = np.array([[1.5], [0.0]])  # first input above its bound by 0.5
    stacked, viol = eval_constraints(ocp, X, U)
    assert stacked.shape == (2 * 6 + 4,)
    assert viol == pytest.approx(0.5, abs=1e-14)
    U_ok = np.zeros((2, 1))
    _, viol_ok = eval_constraints(ocp, X, U_ok)
    assert viol_ok == 0.0


# ---------------------------------------------------------------------------
# regularization


def test_regularize_passes_healthy_matrices_through_unchanged():
    M = np.diag([2.0, 0.5])
    out, clipped = regularize(M)
    assert out is M and clipped is False


def test_regularize_clips_indefinite_matrices():
    M = np.diag([1.0, -0.3])
    out, clipped = regularize(M, floor=1e-8)
    assert clipped is True
    evs = np.linalg.eigvalsh(out)
    assert evs[0] >= 1e-8 - 1e-15
    assert out[0, 0] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# QP assembly


def test_assemble_qp_exact_values_on_integrator():
    ocp = double_integrator_ocp(N=3)
    traj = cold_start(ocp)
    qp = assemble_qp(ocp, traj, LIN)
    ts = 0.125
    A = np.array([[1.0, ts], [0.0, 1.0]])
    B = np.array([[0.5 * ts * ts], [ts]])
    for i in range(3):
        assert np.array_equal(qp.A[i], A)
        assert np.max(np.abs(qp.B[i] - B)) < 1e-15
        assert np.array_equal(qp.M[i], np.diag([2.0, 1.0, 0.5]))
        assert np.array_equal(qp.wx[i], np.zeros(2))  # x0 is a fixed point of the drift
        assert np.array_equal(qp.q[i], np.array([3.0, 0.0, 0.0]))
        assert np.array_equal(qp.wh[i], np.array([-2.5, -2.0, -5.5, -2.0, -1.0, -1.0]))
    assert np.array_equal(qp.Hx[0], np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0], [0, 0], [0, 0]]))
    assert np.array_equal(qp.Hu[0], np.array([[0.0], [0.0], [0.0], [0.0], [1.0], [-1.0]]))
    assert np.array_equal(qp.MN, np.diag([4.0, 2.0]))
    assert np.array_equal(qp.qN, np.array([6.0, 0.0]))
    assert np.array_equal(qp.whN, np.array([-2.5, -2.0, -5.5, -2.0]))
    assert qp.n_h == 6 and qp.n_hN == 4
    assert qp.reg_count == 0


def test_assemble_qp_validates_iterate():
    ocp = double_integrator_ocp(N=3)
    traj = cold_start(ocp)
    bad = traj.copy()
    bad.X[0, 0] += 1e-3
    with pytest.raises(DimensionError, match="initial state"):
        assemble_qp(ocp, bad, LIN)
    short = Trajectory(traj.X[:-1], traj.U, traj.theta, traj.mu, traj.mu_N)
    with pytest.raises(DimensionError):
        assemble_qp(ocp, short, LIN)


def test_assemble_qp_ftc_requires_anchors():
    ocp = double_integrator_ocp(N=3)
    traj = cold_start(ocp)
    pol = SensitivityPolicy("ftc", rectangular_rule(4))
    with pytest.raises(DimensionError, match="anchor"):
        assemble_qp(ocp, traj, pol)
    qp = assemble_qp(ocp, traj, pol, anchors=(traj.X, traj.U))
    ref = assemble_qp(ocp, traj, LIN)
    assert np.max(np.abs(qp.A - ref.A)) < 1e-13  # affine dynamics: any anchors agree
    qp2 = assemble_qp(ocp, traj, pol, anchors=(traj.X + 2.0, traj.U - 1.0))
    assert np.max(np.abs(qp2.A - ref.A)) < 1e-13


def test_exact_hessian_reduces_to_gauss_newton_at_zero_multipliers():
    model = discretize_rk4(cart_pendulum(), 0.05)
    cons = box_constraints(
        np.full(4, -np.inf), np.full(4, np.inf), np.array([-4.0]), np.array([4.0])
    )
    cost = QuadraticCost(np.diag([100.0, 1.0, 100.0, 1.0]), np.array([[10.0]]), np.diag([100.0, 1.0, 100.0, 1.0]))
    ocp = make_ocp(model, cons, cost, 3, np.array([0.0, 0.0, -np.pi, 0.0]))
    traj = cold_start(ocp)
    gn = assemble_qp(ocp, traj, LIN, hessian=GAUSS_NEWTON)
    ex = assemble_qp(ocp, traj, LIN, hessian=EXACT_LAGRANGIAN)
    assert np.max(np.abs(gn.M - ex.M)) < 1e-12
    assert np.max(np.abs(gn.MN - ex.MN)) < 1e-12
    # nonzero dynamics multipliers pull in second-order terms
    traj.theta[:] = 3.0
    ex2 = assemble_qp(ocp, traj, LIN, hessian=EXACT_LAGRANGIAN)
    assert np.max(np.abs(ex2.M - gn.M)) > 1e-3


def test_exact_hessian_output_cost_curvature():
    ocp = output_cost_ocp(N=2)
    traj = cold_start(ocp)
    gn = assemble_qp(ocp, traj, LIN, hessian=GAUSS_NEWTON)
    ex = assemble_qp(ocp, traj, LIN, hessian=EXACT_LAGRANGIAN)
    # output y0 = sin(x0) + x2 curves in x0; Gauss-Newton drops that term
    assert np.max(np.abs(gn.M - ex.M)) > 1e-6
    # input block is shared: the cost is exactly quadratic in u
    assert np.max(np.abs(gn.M[:, 3:, 3:] - ex.M[:, 3:, 3:])) < 1e-10


def test_assemble_qp_regularizes_indefinite_output_hessian():
    # concave output cost direction makes the Gauss-Newton block singular at
    # some iterates; the assembled blocks must satisfy the eigenvalue floor
    ocp = output_cost_ocp(N=3)
    rng = np.random.default_rng(9)
    U = rng.normal(size=(3, 1))
    X = rollout(ocp.model, ocp.x0, U)
    traj = Trajectory(X, U, np.zeros((4, 3)), np.zeros((3, 2)), np.zeros(0))
    qp = assemble_qp(ocp, traj, LIN)
    for i in range(3):
        assert np.min(np.linalg.eigvalsh(qp.M[i])) >= 1e-8 - 1e-14
    assert np.min(np.linalg.eigvalsh(qp.MN)) >= 1e-8 - 1e-14
