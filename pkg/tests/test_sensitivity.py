"""Quadrature rules, anchor policies, and the two sensitivity paths."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import double_integrator
from unimpc.engine import Trajectory
from unimpc.model import DimensionError, box_constraints, cart_pendulum, discretize_rk4, eval_dynamics, rollout
from unimpc.sensitivity import (
    AnchorError,
    ConstantPoint,
    ExternalSequence,
    MeasuredStateLastInput,
    PreviousIterate,
    SensitivityPolicy,
    ZeroAnchors,
    ftc_embedding_residual,
    ftc_stage,
    ftc_trajectory,
    gauss_legendre_rule,
    linearize_stage,
    linearize_trajectory,
    rectangular_rule,
    select_anchors,
    trajectory_offsets,
)

CART = discretize_rk4(cart_pendulum(), 0.02)
CART_BOX = box_constraints(
    np.array([-5.0, -5.0, -7.0, -10.0]),
    np.array([5.0, 5.0, 7.0, 10.0]),
    np.array([-4.0]),
    np.array([4.0]),
)


def cart_iterate(N=5, seed=3):
    rng = np.random.default_rng(seed)
    U = rng.uniform(-2.0, 2.0, size=(N, 1))
    X = rollout(CART, np.array([0.0, 0.0, -np.pi, 0.0]), U)
    return X, U


# ---------------------------------------------------------------------------
# quadrature rules


def test_rectangular_rule_is_composite_midpoint():
    r = rectangular_rule(4)
    assert np.array_equal(r.nodes, np.array([0.125, 0.375, 0.625, 0.875]))
    assert np.array_equal(r.weights, np.full(4, 0.25))


def test_gauss_legendre_exact_for_high_degree_polynomials():
    r = gauss_legendre_rule(4)
    # degree <= 2n-1 polynomials integrate exactly over [0, 1]
    for k in range(8):
        approx = float(np.sum(r.weights * r.nodes**k))
        assert approx == pytest.approx(1.0 / (k + 1), abs=1e-14)


def test_midpoint_rule_exact_for_linear():
    r = rectangular_rule(7)
    assert float(np.sum(r.weights * r.nodes)) == pytest.approx(0.5, abs=1e-15)


@settings(deadline=None)
@given(st.integers(1, 48), st.sampled_from([rectangular_rule, gauss_legendre_rule]))
def test_rule_weights_sum_to_one_nodes_inside_unit_interval(n, make):
    r = make(n)
    assert len(r.nodes) == n and len(r.weights) == n
    assert abs(float(np.sum(r.weights)) - 1.0) < 1e-12
    assert np.all(r.nodes > 0.0) and np.all(r.nodes < 1.0)
    assert np.all(np.diff(r.nodes) > 0.0)
    assert np.all(r.weights > 0.0)


def test_rules_reject_nonpositive_counts():
    with pytest.raises(DimensionError):
        rectangular_rule(0)
    with pytest.raises(DimensionError):
        gauss_legendre_rule(0)


def test_sensitivity_policy_validation():
    SensitivityPolicy("linearize")
    SensitivityPolicy("ftc", rectangular_rule(3))
    with pytest.raises(DimensionError):
        SensitivityPolicy("ftc")  # rule required
    with pytest.raises(DimensionError):
        SensitivityPolicy("nonsense")


# ---------------------------------------------------------------------------
# anchor policies


def test_select_anchors_per_policy():
    X, U = cart_iterate()
    x_meas = np.array([0.1, 0.2, 0.3, 0.4])

    Xa, Ua = select_anchors(ZeroAnchors(), 0, x_meas, None, X, U)
    assert np.array_equal(Xa, np.zeros_like(X)) and np.array_equal(Ua, np.zeros_like(U))

    pt = ConstantPoint(np.array([1.0, 0.0, -1.0, 0.0]), np.array([0.5]))
    Xa, Ua = select_anchors(pt, 0, x_meas, None, X, U)
    assert np.array_equal(Xa, np.tile(pt.x, (6, 1))) and np.array_equal(Ua, np.tile(pt.u, (5, 1)))

    Xa, Ua = select_anchors(MeasuredStateLastInput(), 2, x_meas, np.array([0.7]), X, U)
    assert np.array_equal(Xa, np.tile(x_meas, (6, 1))) and np.array_equal(Ua, np.full((5, 1), 0.7))
    # missing previous input defaults to zero
    _, Ua0 = select_anchors(MeasuredStateLastInput(), 0, x_meas, None, X, U)
    assert np.array_equal(Ua0, np.zeros((5, 1)))

    Xa, Ua = select_anchors(PreviousIterate(), 0, x_meas, None, X, U)
    assert Xa is X and Ua is U

    ext = ExternalSequence(X=X + 1.0, U=U - 1.0)
    Xa, Ua = select_anchors(ext, 0, x_meas, None, X, U)
    assert np.array_equal(Xa, X + 1.0) and np.array_equal(Ua, U - 1.0)


def test_external_sequence_pulls_reference_trajectory():
    X, U = cart_iterate()
    ref = Trajectory(X + 0.5, U * 2.0, np.zeros((6, 4)), np.zeros((5, 10)), np.zeros(8))
    Xa, Ua = select_anchors(ExternalSequence(), 0, X[0], None, X, U, optimal_ref=ref)
    assert np.array_equal(Xa, ref.X) and np.array_equal(Ua, ref.U)
    with pytest.raises(AnchorError):
        select_anchors(ExternalSequence(), 0, X[0], None, X, U, optimal_ref=None)


def test_select_anchors_shape_validation():
    X, U = cart_iterate()
    with pytest.raises(DimensionError):
        select_anchors(ConstantPoint(np.zeros(3), np.zeros(1)), 0, X[0], None, X, U)
    with pytest.raises(DimensionError):
        select_anchors(ExternalSequence(X=X[:-1], U=U), 0, X[0], None, X, U)
    with pytest.raises(DimensionError):
        select_anchors(ZeroAnchors(), 0, X[0], None, X[:-1], U)


# ---------------------------------------------------------------------------
# the two sensitivity paths


def test_offsets_are_nonlinear_residuals_at_iterate():
    X, U = cart_iterate()
    X_bad = X.copy()
    X_bad[2] += 0.05  # introduce a dynamics defect
    dwx, dwh, dwhN, y, yN = trajectory_offsets(CART, CART_BOX, X_bad, U)
    for i in range(U.shape[0]):
        expected = eval_dynamics(CART, X_bad[i], U[i]) - X_bad[i + 1]
        assert np.max(np.abs(dwx[i] - expected)) < 1e-14
        h = np.array([float(v) for v in CART_BOX.stage_fn(list(X_bad[i]), list(U[i]))])
        assert np.array_equal(dwh[i], h)
    hN = np.array([float(v) for v in CART_BOX.terminal_fn(list(X_bad[-1]))])
    assert np.array_equal(dwhN, hN)
    assert y is None and yN is None


def test_offsets_shared_bitwise_between_paths():
    X, U = cart_iterate()
    lin = linearize_trajectory(CART, CART_BOX, X, U)
    rng = np.random.default_rng(0)
    Xa = X + rng.normal(scale=0.3, size=X.shape)
    Ua = U + rng.normal(scale=0.3, size=U.shape)
    ftc = ftc_trajectory(CART, CART_BOX, X, U, Xa, Ua, rectangular_rule(5))
    assert np.array_equal(lin.dwx, ftc.dwx)
    assert np.array_equal(lin.dwh, ftc.dwh)
    assert np.array_equal(lin.dwhN, ftc.dwhN)


def test_ftc_at_iterate_anchors_reduces_to_linearize():
    X, U = cart_iterate()
    lin = linearize_trajectory(CART, CART_BOX, X, U)
    for rule in (rectangular_rule(20), gauss_legendre_rule(8)):
        ftc = ftc_trajectory(CART, CART_BOX, X, U, X, U, rule)
        for name in ("A", "B", "Hx", "Hu", "HxN"):
            a, b = getattr(lin, name), getattr(ftc, name)
            assert np.max(np.abs(a - b)) < 1e-13, name


def test_ftc_affine_constraint_rows_independent_of_anchors():
    X, U = cart_iterate()
    lin = linearize_trajectory(CART, CART_BOX, X, U)
    ftc = ftc_trajectory(CART, CART_BOX, X, U, X + 0.7, U - 0.4, rectangular_rule(3))
    # box rows are affine, so integrated Jacobians equal pointwise ones
    assert np.max(np.abs(lin.Hx - ftc.Hx)) < 1e-13
    assert np.max(np.abs(lin.Hu - ftc.Hu)) < 1e-13
    assert np.max(np.abs(lin.HxN - ftc.HxN)) < 1e-13


def test_ftc_anchor_shape_mismatch_raises():
    X, U = cart_iterate()
    with pytest.raises(DimensionError):
        ftc_trajectory(CART, CART_BOX, X, U, X[:-1], U, rectangular_rule(3))


def test_stage_helpers_match_trajectory_versions():
    X, U = cart_iterate()
    lin = linearize_trajectory(CART, CART_BOX, X, U)
    st0 = linearize_stage(CART, CART_BOX, X[0], U[0], X[1])
    assert np.max(np.abs(st0.A - lin.A[0])) < 1e-14
    assert np.max(np.abs(st0.B - lin.B[0])) < 1e-14
    rule = gauss_legendre_rule(6)
    xa = X[0] + 0.2
    ua = U[0] - 0.3
    Xa = np.vstack([xa, X[1]])
    ftc = ftc_trajectory(CART, CART_BOX, X[:2], U[:1], Xa, ua[None, :], rule)
    stf = ftc_stage(CART, CART_BOX, X[0], U[0], X[1], xa, ua, rule)
    assert np.max(np.abs(stf.A - ftc.A[0])) < 1e-14
    assert np.max(np.abs(stf.B - ftc.B[0])) < 1e-14


def test_embedding_residual_zero_for_affine_dynamics():
    m = double_integrator()
    x = np.array([1.5, -0.5])
    u = np.array([0.75])
    xa = np.array([-2.0, 1.0])
    ua = np.array([-0.25])
    for rule in (rectangular_rule(1), rectangular_rule(3), gauss_legendre_rule(2)):
        assert ftc_embedding_residual(m, x, u, xa, ua, rule) < 1e-14


def test_embedding_residual_zero_at_anchor():
    x = np.array([0.3, -0.4, 2.0, 0.6])
    u = np.array([1.2])
    assert ftc_embedding_residual(CART, x, u, x, u, rectangular_rule(4)) < 1e-14


def test_embedding_residual_converges_with_node_count():
    x = np.array([0.3, -0.4, 2.0, 0.6])
    u = np.array([1.2])
    xa = np.array([-0.5, 0.8, -1.0, -0.9])
    ua = np.array([-2.0])
    res = [ftc_embedding_residual(CART, x, u, xa, ua, rectangular_rule(n)) for n in (2, 8, 32)]
    assert res[0] > res[1] > res[2]
    # composite midpoint is second order: quartering the step cuts the error ~16x
    assert res[1] < 0.1 * res[0]
    assert ftc_embedding_residual(CART, x, u, xa, ua, gauss_legendre_rule(32)) < 1e-12


def test_integrated_jacobians_average_endpoint_jacobians_for_quadratic_model():
    # dynamics quadratic in x: the integrand is linear along the segment, so
    # the midpoint rule with a single node is already exact
    from unimpc.model import DynamicsModel, fn_jacobians

    quad = DynamicsModel("quad", 1, 1, False, lambda xc, uc: [xc[0] * xc[0] + uc[0]])
    x, u = np.array([2.0]), np.array([0.5])
    xa, ua = np.array([-1.0]), np.array([0.0])
    st1 = ftc_stage(quad, None, x, u, np.array([4.5]), xa, ua, rectangular_rule(1))
    A_end, _ = fn_jacobians(quad.eval_fn, list(x), list(u))
    A_anchor, _ = fn_jacobians(quad.eval_fn, list(xa), list(ua))
    assert st1.A[0, 0] == pytest.approx(0.5 * (A_end[0, 0] + A_anchor[0, 0]), abs=1e-14)
    assert ftc_embedding_residual(quad, x, u, xa, ua, rectangular_rule(1)) < 1e-14
