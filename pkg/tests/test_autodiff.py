"""Forward-mode AD against closed forms and central finite differences."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimpc import autodiff as ad
from unimpc.oracles import fd_hessian, fd_jacobian


def test_dual_scalar_derivative_matches_closed_form():
    x = 0.7
    (xd,) = ad.seed([x], 0, 1)
    out = ad.sin(xd) * ad.exp(xd) + xd**3
    expected_val = np.sin(x) * np.exp(x) + x**3
    expected_dot = np.exp(x) * (np.sin(x) + np.cos(x)) + 3 * x**2
    assert out.val == pytest.approx(expected_val, abs=1e-14)
    assert out.dot[0] == pytest.approx(expected_dot, abs=1e-13)


def test_dual_arithmetic_ops_match_fd():
    def f(v):
        a, b, c = v
        return np.array(
            [
                a * b - c / (1.0 + a * a),
                (2.0 - a) / (b + 3.0) + b**2,
                -a + 4.0 * c - c**3 / 2.0,
            ]
        )

    def f_dual(v):
        a, b, c = v
        return [
            a * b - c / (1.0 + a * a),
            (2.0 - a) / (b + 3.0) + b**2,
            -a + 4.0 * c - c**3 / 2.0,
        ]

    x = np.array([0.3, -0.8, 1.2])
    comps = ad.seed(list(x), 0, 3)
    J = ad.jacobian(f_dual(comps), 3)
    J_ref = fd_jacobian(f, x)
    assert np.max(np.abs(J - J_ref)) < 1e-8


def test_dispatch_functions_pass_plain_values_through():
    for fn, ref in [
        (ad.sin, np.sin),
        (ad.cos, np.cos),
        (ad.tan, np.tan),
        (ad.arctan, np.arctan),
        (ad.exp, np.exp),
        (ad.tanh, np.tanh),
    ]:
        assert fn(0.37) == ref(0.37)
    assert ad.log(1.37) == np.log(1.37)
    assert ad.sqrt(1.37) == np.sqrt(1.37)


def test_dispatch_functions_first_derivatives_match_fd():
    def f(v):
        (x,) = v
        return np.array(
            [
                np.sin(x) + np.cos(2 * x),
                np.tan(x / 4.0),
                np.arctan(x),
                np.exp(-x),
                np.log(2.0 + x),
                np.sqrt(3.0 + x),
                np.tanh(x),
            ]
        )

    def f_dual(x):
        return [
            ad.sin(x) + ad.cos(2 * x),
            ad.tan(x / 4.0),
            ad.arctan(x),
            ad.exp(-x),
            ad.log(2.0 + x),
            ad.sqrt(3.0 + x),
            ad.tanh(x),
        ]

    x = 0.6
    (xd,) = ad.seed([x], 0, 1)
    J = ad.jacobian(f_dual(xd), 1)
    J_ref = fd_jacobian(f, np.array([x]))
    assert np.max(np.abs(J - J_ref)) < 1e-8


def test_jacobian_batched_matches_per_point():
    def f_comps(xc):
        a, b = xc
        return [a * ad.sin(b), a + b * b]

    pts = np.array([[0.2, -1.0], [1.3, 0.4], [-0.7, 2.1]])
    comps = ad.seed([pts[:, 0], pts[:, 1]], 0, 2)
    J = ad.jacobian(f_comps(comps), 2, batch_shape=(3,))
    assert J.shape == (3, 2, 2)
    for i, p in enumerate(pts):
        ci = ad.seed(list(p), 0, 2)
        Ji = ad.jacobian(f_comps(ci), 2)
        assert np.max(np.abs(J[i] - Ji)) == 0.0


def test_jacobian_constant_outputs_give_zero_rows():
    (xd,) = ad.seed([1.5], 0, 1)
    J = ad.jacobian([xd * xd, 3.0, np.float64(2.0)], 1)
    assert J.shape == (3, 1)
    assert J[0, 0] == pytest.approx(3.0)
    assert J[1, 0] == 0.0 and J[2, 0] == 0.0


def test_hessian_matches_fd():
    def f(v):
        a, b, c = v
        return a * a * b + ad.sin(b * c) + ad.exp(a) * c

    pt = [0.4, -0.3, 0.9]
    H = ad.hessian(f, pt)
    H_ref = fd_hessian(lambda v: float(ad.value(f(list(v)))), np.array(pt))
    assert H.shape == (3, 3)
    assert np.max(np.abs(H - H.T)) < 1e-12
    assert np.max(np.abs(H - H_ref)) < 1e-6


def test_hessian_power_and_division_closed_form():
    # f(x, y) = x^3 / y: fxx = 6x/y, fxy = -3x^2/y^2, fyy = 2x^3/y^3
    x, y = 1.25, -0.5
    H = ad.hessian(lambda v: v[0] ** 3 / v[1], [x, y])
    assert H[0, 0] == pytest.approx(6 * x / y, rel=1e-12)
    assert H[0, 1] == pytest.approx(-3 * x * x / (y * y), rel=1e-12)
    assert H[1, 0] == pytest.approx(H[0, 1], rel=1e-12)
    assert H[1, 1] == pytest.approx(2 * x**3 / y**3, rel=1e-12)


def test_hessian_of_affine_function_is_zero():
    H = ad.hessian(lambda v: 2.0 * v[0] - 3.0 * v[1] + 1.0, [0.3, 0.8])
    assert np.array_equal(H, np.zeros((2, 2)))


def test_dual_comparisons_use_values():
    d = ad.Dual(1.0, np.array([5.0]))
    assert (d < 2.0) and (d <= 1.0) and (d > 0.0) and (d >= 1.0)
    assert not (d > ad.Dual(1.5, np.array([0.0])))


def test_dual_rejects_dual_exponent():
    d = ad.Dual(2.0, np.array([1.0]))
    with pytest.raises(TypeError):
        d**d
    d2 = ad.Dual2(2.0, 1.0, 0.0, 0.0)
    with pytest.raises(TypeError):
        d2**d2


def test_value_unwraps_both_orders():
    assert ad.value(ad.Dual(3.0, np.zeros(1))) == 3.0
    assert ad.value(ad.Dual2(4.0, 1.0, 1.0, 0.0)) == 4.0
    assert ad.value(2.5) == 2.5


@settings(deadline=None, max_examples=40)
@given(st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2))
def test_dual_gradient_matches_fd_on_random_points(pt):
    def f(v):
        a, b = v
        return np.array([np.exp(a) * np.sin(b) + np.arctan(a * b) + np.tanh(a - b)])

    def f_dual(v):
        a, b = v
        return [ad.exp(a) * ad.sin(b) + ad.arctan(a * b) + ad.tanh(a - b)]

    x = np.array(pt)
    J = ad.jacobian(f_dual(ad.seed(list(x), 0, 2)), 2)
    J_ref = fd_jacobian(f, x)
    assert np.max(np.abs(J - J_ref)) < 1e-6
