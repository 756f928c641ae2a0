"""Dynamics models, RK4 discretization, constraint rows, Lagrangian Hessians."""
import numpy as np
import pytest
from scipy.integrate import solve_ivp

from unimpc.model import (
    CartPendulumParams,
    DimensionError,
    DynamicsModel,
    NumericFailure,
    SingleTrackParams,
    box_constraints,
    cart_pendulum,
    discretize_rk4,
    eval_dynamics,
    hessian_lagrangian_stage,
    hessian_lagrangian_terminal,
    jacobians,
    rk4_step,
    rollout,
    single_track,
    with_ignored_inputs,
)
from unimpc.oracles import fd_hessian, fd_model_jacobians


def test_cart_pendulum_upright_is_equilibrium():
    m = cart_pendulum()
    assert m.continuous and m.n_x == 4 and m.n_u == 1
    f = eval_dynamics(m, np.zeros(4), np.zeros(1))
    assert np.max(np.abs(f)) == 0.0


def test_cart_pendulum_hanging_is_equilibrium():
    m = cart_pendulum()
    f = eval_dynamics(m, np.array([0.3, 0.0, np.pi, 0.0]), np.zeros(1))
    assert np.max(np.abs(f)) < 1e-12


def test_cart_pendulum_force_accelerates_cart():
    p = CartPendulumParams()
    m = cart_pendulum(p)
    f = eval_dynamics(m, np.zeros(4), np.array([2.0]))
    # at the upright equilibrium sin(phi) = 0: p_dd = F / cart_mass,
    # phi_dd = -p_dd / length (the cart accelerating tips the pole backwards)
    assert f[1] == pytest.approx(2.0 / p.cart_mass, rel=1e-14)
    assert f[3] == pytest.approx(-f[1] / p.pole_length, rel=1e-14)


def test_rk4_step_matches_textbook_stencil():
    m = cart_pendulum()
    x = np.array([0.2, -0.1, 2.5, 0.3])
    u = np.array([1.7])
    ts = 0.02

    def f(xv):
        return eval_dynamics(m, xv, u)

    k1 = f(x)
    k2 = f(x + 0.5 * ts * k1)
    k3 = f(x + 0.5 * ts * k2)
    k4 = f(x + ts * k3)
    expected = x + (ts / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    assert np.max(np.abs(rk4_step(m, x, u, ts) - expected)) < 1e-13


def test_discretization_matches_high_accuracy_integration():
    m = cart_pendulum()
    x0 = np.array([0.2, -0.1, 2.5, 0.3])
    u = np.array([1.7])
    ts = 0.1
    disc = discretize_rk4(m, ts, substeps=50)
    ref = solve_ivp(
        lambda _, xv: eval_dynamics(m, xv, u),
        (0.0, ts),
        x0,
        rtol=1e-11,
        atol=1e-12,
        dense_output=False,
    )
    assert np.max(np.abs(eval_dynamics(disc, x0, u) - ref.y[:, -1])) < 1e-8


def test_discretize_substeps_compose_half_steps():
    m = cart_pendulum()
    x = np.array([0.1, 0.5, -1.0, 0.2])
    u = np.array([-0.8])
    disc2 = discretize_rk4(m, 0.04, substeps=2)
    two_halves = rk4_step(m, rk4_step(m, x, u, 0.02), u, 0.02)
    assert np.max(np.abs(eval_dynamics(disc2, x, u) - two_halves)) < 1e-14
    assert not disc2.continuous


def test_discretize_rejects_bad_arguments():
    m = cart_pendulum()
    disc = discretize_rk4(m, 0.01)
    with pytest.raises(DimensionError):
        discretize_rk4(disc, 0.01)  # already discrete
    with pytest.raises(DimensionError):
        discretize_rk4(m, 0.0)
    with pytest.raises(DimensionError):
        discretize_rk4(m, 0.01, substeps=0)
    with pytest.raises(DimensionError):
        rk4_step(disc, np.zeros(4), np.zeros(1), 0.01)


def test_single_track_straight_line_rows():
    p = SingleTrackParams()
    m = single_track(p)
    assert m.n_x == 9 and m.n_u == 3
    vx, T = 1.0, 0.5
    x = np.array([0.0, 0.0, 0.0, vx, 0.0, 0.0, T, 0.0, 0.0])
    u = np.array([0.3, -0.2, 0.7])
    f = eval_dynamics(m, x, u)
    # straight, no sideslip: positions advance along x, no lateral/yaw forces
    assert f[0] == pytest.approx(vx) and abs(f[1]) < 1e-14 and f[2] == 0.0
    F_x = (p.c1 + p.c2 * vx) * T + p.c3 * vx * vx + p.c4
    assert f[3] == pytest.approx(F_x / p.mass, rel=1e-12)
    assert abs(f[4]) < 1e-12 and abs(f[5]) < 1e-9
    # drivetrain / steering / progress states are pure integrators of the input
    assert np.array_equal(f[6:9], u)


def test_single_track_left_steer_turns_left():
    m = single_track()
    x = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.3, 0.25, 0.0])
    f = eval_dynamics(m, x, np.zeros(3))
    assert f[5] > 0.0  # positive yaw acceleration for positive steering angle


def test_jacobians_match_finite_differences():
    cart = discretize_rk4(cart_pendulum(), 0.02)
    x = np.array([0.3, -0.4, 2.0, 0.6])
    u = np.array([1.2])
    A, B = jacobians(cart, x, u)
    A_ref, B_ref = fd_model_jacobians(cart, x, u)
    scale = 1.0 + max(np.max(np.abs(A_ref)), np.max(np.abs(B_ref)))
    assert np.max(np.abs(A - A_ref)) / scale < 1e-7
    assert np.max(np.abs(B - B_ref)) / scale < 1e-7

    car = single_track()
    x = np.array([0.1, -0.2, 0.3, 1.2, 0.05, 0.4, 0.5, 0.1, 2.0])
    u = np.array([0.3, -0.1, 0.9])
    A, B = jacobians(car, x, u)
    A_ref, B_ref = fd_model_jacobians(car, x, u)
    scale = 1.0 + max(np.max(np.abs(A_ref)), np.max(np.abs(B_ref)))
    assert np.max(np.abs(A - A_ref)) / scale < 1e-6
    assert np.max(np.abs(B - B_ref)) / scale < 1e-6


def test_with_ignored_inputs_zero_jacobian_columns():
    base = discretize_rk4(cart_pendulum(), 0.02)
    ext = with_ignored_inputs(base, 2)
    assert ext.n_u == 3 and ext.n_x == base.n_x
    x = np.array([0.3, -0.4, 2.0, 0.6])
    assert np.array_equal(
        eval_dynamics(ext, x, np.array([1.2, 9.0, -7.0])),
        eval_dynamics(base, x, np.array([1.2])),
    )
    _, B = jacobians(ext, x, np.array([1.2, 9.0, -7.0]))
    assert np.array_equal(B[:, 1:], np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        with_ignored_inputs(base, -1)


def test_rollout_matches_stepwise_evaluation():
    m = discretize_rk4(cart_pendulum(), 0.02)
    U = np.array([[0.5], [-1.0], [2.0]])
    x0 = np.array([0.0, 0.0, -np.pi, 0.0])
    X = rollout(m, x0, U)
    assert X.shape == (4, 4)
    x = x0
    for i in range(3):
        x = eval_dynamics(m, x, U[i])
        assert np.array_equal(X[i + 1], x)
    with pytest.raises(DimensionError):
        rollout(cart_pendulum(), x0, U)  # continuous model


def test_eval_dynamics_validates_inputs():
    m = cart_pendulum()
    with pytest.raises(DimensionError):
        eval_dynamics(m, np.zeros(3), np.zeros(1))
    with pytest.raises(DimensionError):
        eval_dynamics(m, np.zeros(4), np.zeros(2))
    with pytest.raises(NumericFailure):
        eval_dynamics(m, np.array([0.0, np.nan, 0.0, 0.0]), np.zeros(1))


def test_non_finite_dynamics_output_raises():
    bad = DynamicsModel("bad", 1, 1, False, lambda xc, uc: [xc[0] * np.inf])
    with pytest.raises(NumericFailure):
        eval_dynamics(bad, np.array([1.0]), np.array([0.0]))


def test_box_constraints_row_order_and_values():
    cons = box_constraints(
        x_lb=np.array([-1.0, -np.inf]),
        x_ub=np.array([2.0, np.inf]),
        u_lb=np.array([-np.inf]),
        u_ub=np.array([3.0]),
    )
    # finite rows only: x0 upper, x0 lower, u0 upper
    assert cons.n_h == 3 and cons.n_hN == 2
    rows = [float(v) for v in cons.stage_fn([0.5, 7.0], [1.0])]
    assert rows == pytest.approx([0.5 - 2.0, -1.0 - 0.5, 1.0 - 3.0])
    t_rows = [float(v) for v in cons.terminal_fn([0.5, 7.0])]
    assert t_rows == pytest.approx([0.5 - 2.0, -1.0 - 0.5])


def test_box_constraints_extra_rows_appended():
    cons = box_constraints(
        x_lb=np.array([-1.0]),
        x_ub=np.array([1.0]),
        u_lb=np.array([-1.0]),
        u_ub=np.array([1.0]),
        extra_stage=(1, lambda xc, uc: [xc[0] + uc[0] - 5.0]),
        extra_terminal=(1, lambda xc: [xc[0] - 9.0]),
    )
    assert cons.n_h == 5 and cons.n_hN == 3
    rows = [float(v) for v in cons.stage_fn([0.2], [0.3])]
    assert rows[-1] == pytest.approx(0.2 + 0.3 - 5.0)
    assert float(cons.terminal_fn([0.2])[-1]) == pytest.approx(0.2 - 9.0)


def test_box_constraints_rejects_crossed_bounds():
    with pytest.raises(DimensionError):
        box_constraints(np.array([1.0]), np.array([-1.0]), np.array([0.0]), np.array([1.0]))


def test_stage_hessian_is_cost_blocks_at_zero_multipliers():
    m = discretize_rk4(cart_pendulum(), 0.02)
    Q = np.diag([100.0, 1.0, 100.0, 1.0])
    R = np.array([[10.0]])
    H = hessian_lagrangian_stage(m, None, np.array([0.1, 0.2, -2.0, 0.5]), np.array([1.0]), np.zeros(4), None, Q, R)
    expected = np.zeros((5, 5))
    expected[:4, :4] = Q
    expected[4, 4] = R[0, 0]
    assert np.max(np.abs(H - expected)) < 1e-12


def test_stage_hessian_with_multipliers_matches_fd():
    m = discretize_rk4(cart_pendulum(), 0.02)
    cons = box_constraints(
        np.array([-5.0, -5.0, -7.0, -10.0]),
        np.array([5.0, 5.0, 7.0, 10.0]),
        np.array([-4.0]),
        np.array([4.0]),
    )
    Q = np.diag([100.0, 1.0, 100.0, 1.0])
    R = np.array([[10.0]])
    x = np.array([0.3, -0.4, 2.0, 0.6])
    u = np.array([1.2])
    th = np.array([0.4, -1.3, 2.2, 0.7])
    mu = np.linspace(0.1, 1.0, cons.n_h)
    H = hessian_lagrangian_stage(m, cons, x, u, th, mu, Q, R)

    def lag(v):
        xv, uv = v[:4], v[4:]
        val = 0.5 * (xv @ Q @ xv + uv @ R @ uv) + th @ eval_dynamics(m, xv, uv)
        val += mu @ np.array([float(r) for r in cons.stage_fn(list(xv), list(uv))])
        return val

    H_ref = fd_hessian(lag, np.concatenate([x, u]))
    assert np.max(np.abs(H - H_ref)) / (1.0 + np.max(np.abs(H_ref))) < 1e-5


def test_terminal_hessian_matches_fd():
    cons = box_constraints(
        np.array([-5.0, -5.0]),
        np.array([5.0, 5.0]),
        np.zeros(0),
        np.zeros(0),
        extra_terminal=(1, lambda xc: [xc[0] * xc[0] * xc[1] - 1.0]),
    )
    W = np.diag([3.0, 7.0])
    x = np.array([0.6, -0.9])
    muN = np.array([0.0, 0.0, 0.0, 0.0, 1.7])
    H = hessian_lagrangian_terminal(cons, x, W, muN)

    def lag(v):
        val = 0.5 * v @ W @ v
        val += muN @ np.array([float(r) for r in cons.terminal_fn(list(v))])
        return val

    H_ref = fd_hessian(lag, x)
    assert np.max(np.abs(H - H_ref)) / (1.0 + np.max(np.abs(H_ref))) < 1e-6
