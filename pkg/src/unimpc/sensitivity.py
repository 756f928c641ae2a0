"""Stage sensitivity generation for the unified QP pipeline.

Two interchangeable policies produce the stage matrices of the quadratic
subproblem:

* ``linearize``  — pointwise Jacobians at the current iterate (the classical
  sequential-quadratic choice);
* ``ftc``        — Jacobians of the exact factorization
  ``f(x,u) = Abar (x - xa) + Bbar (u - ua) + f(xa, ua)`` where ``Abar`` /
  ``Bbar`` are fundamental-theorem-of-calculus integrals of the pointwise
  Jacobians along the segment from an *anchor* ``(xa, ua)`` to the iterate,
  approximated by a quadrature rule.

Both paths share one offset computation, so the affine terms of the QP are
bitwise identical across policies.  With anchors equal to the iterate the
integrand is constant and the ``ftc`` matrices coincide with ``linearize``
up to the (near-exact) quadrature weight sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import autodiff as ad
from .model import DimensionError, DynamicsModel, fn_jacobians

if TYPE_CHECKING:  # pragma: no cover
    from .model import ConstraintSet, OutputMap


class AnchorError(ValueError):
    """Anchor policy cannot be resolved with the available context."""


# ---------------------------------------------------------------------------
# quadrature rules


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights approximating an integral over the unit interval."""

    kind: str
    nodes: np.ndarray
    weights: np.ndarray


def rectangular_rule(n: int) -> QuadratureRule:
    """Composite midpoint rule: node ``j`` at ``(j + 1/2)/n``, weight ``1/n``."""
    if n < 1:
        raise DimensionError(f"quadrature rule needs n >= 1, got {n}")
    nodes = (np.arange(n) + 0.5) / n
    return QuadratureRule("rectangular", nodes, np.full(n, 1.0 / n))


def gauss_legendre_rule(n: int) -> QuadratureRule:
    """Gauss-Legendre nodes/weights mapped from [-1, 1] to [0, 1]."""
    if n < 1:
        raise DimensionError(f"quadrature rule needs n >= 1, got {n}")
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return QuadratureRule("gauss_legendre", 0.5 * (nodes + 1.0), 0.5 * weights)


@dataclass(frozen=True)
class SensitivityPolicy:
    """Selects the stage-matrix generation path.

    ``kind`` is ``"linearize"`` or ``"ftc"``; the quadrature rule is required
    for (and only used by) the ``ftc`` path.
    """

    kind: str
    rule: QuadratureRule | None = None

    def __post_init__(self):
        if self.kind not in ("linearize", "ftc"):
            raise DimensionError(f"unknown sensitivity kind {self.kind!r}")
        if self.kind == "ftc" and self.rule is None:
            raise DimensionError("ftc sensitivities need a quadrature rule")


# ---------------------------------------------------------------------------
# anchor policies


class AnchorPolicy:
    """Base tag for anchor selection strategies."""


@dataclass(frozen=True)
class ZeroAnchors(AnchorPolicy):
    """Anchor every stage at the origin of the state/input space."""


@dataclass(frozen=True)
class ConstantPoint(AnchorPolicy):
    """Anchor every stage at one fixed operating point."""

    x: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class MeasuredStateLastInput(AnchorPolicy):
    """Anchor at the current measurement and previously applied input."""


@dataclass(frozen=True)
class PreviousIterate(AnchorPolicy):
    """Anchor at the iterate itself; reduces the ftc path to linearize."""


@dataclass(frozen=True)
class ExternalSequence(AnchorPolicy):
    """Anchor at an externally supplied trajectory.

    With ``X is None`` the sequence is taken from the ``optimal_ref``
    argument of :func:`select_anchors` (the "anchors at the optimum" study).
    """

    X: np.ndarray | None = None
    U: np.ndarray | None = None


def select_anchors(
    policy: AnchorPolicy,
    k: int,
    x_meas: np.ndarray,
    u_prev: np.ndarray | None,
    iterate_X: np.ndarray,
    iterate_U: np.ndarray,
    optimal_ref=None,
):
    """Resolve an anchor policy into per-stage anchor sequences.

    Returns ``(Xa, Ua)`` with shapes matching the iterate.  ``u_prev`` may be
    ``None`` at the first sample, in which case the last applied input is
    taken to be zero.
    """
    N1, n_x = iterate_X.shape
    N, n_u = iterate_U.shape
    if N1 != N + 1:
        raise DimensionError(f"iterate shapes disagree: X has {N1} rows, U has {N}")
    if isinstance(policy, ZeroAnchors):
        return np.zeros((N + 1, n_x)), np.zeros((N, n_u))
    if isinstance(policy, ConstantPoint):
        xc = np.asarray(policy.x, dtype=float)
        uc = np.asarray(policy.u, dtype=float)
        if xc.shape != (n_x,) or uc.shape != (n_u,):
            raise DimensionError("constant anchor point has wrong dimensions")
        return np.tile(xc, (N + 1, 1)), np.tile(uc, (N, 1))
    if isinstance(policy, MeasuredStateLastInput):
        u_last = np.zeros(n_u) if u_prev is None else np.asarray(u_prev, dtype=float)
        return np.tile(np.asarray(x_meas, dtype=float), (N + 1, 1)), np.tile(u_last, (N, 1))
    if isinstance(policy, PreviousIterate):
        return iterate_X, iterate_U
    if isinstance(policy, ExternalSequence):
        Xa, Ua = policy.X, policy.U
        if Xa is None or Ua is None:
            if optimal_ref is None:
                raise AnchorError("missing reference trajectory for ExternalSequence")
            Xa, Ua = optimal_ref.X, optimal_ref.U
        Xa = np.asarray(Xa, dtype=float)
        Ua = np.asarray(Ua, dtype=float)
        if Xa.shape != (N + 1, n_x) or Ua.shape != (N, n_u):
            raise DimensionError(
                f"external anchor sequence has shapes {Xa.shape}/{Ua.shape}, "
                f"expected {(N + 1, n_x)}/{(N, n_u)}"
            )
        return Xa, Ua
    raise DimensionError(f"unknown anchor policy {policy!r}")


# ---------------------------------------------------------------------------
# sensitivity containers


@dataclass
class StageSensitivities:
    """QP matrices and affine offsets for one stage."""

    A: np.ndarray
    B: np.ndarray
    Hx: np.ndarray
    Hu: np.ndarray
    dwx: np.ndarray
    dwh: np.ndarray
    C: np.ndarray | None = None
    y: np.ndarray | None = None


@dataclass
class TrajectorySensitivities:
    """Stage-stacked sensitivities plus the terminal rows."""

    A: np.ndarray  # (N, n_x, n_x)
    B: np.ndarray  # (N, n_x, n_u)
    Hx: np.ndarray  # (N, n_h, n_x)
    Hu: np.ndarray  # (N, n_h, n_u)
    dwx: np.ndarray  # (N, n_x)
    dwh: np.ndarray  # (N, n_h)
    HxN: np.ndarray  # (n_hN, n_x)
    dwhN: np.ndarray  # (n_hN,)
    C: np.ndarray | None = None  # (N, n_y, n_x)
    y: np.ndarray | None = None  # (N, n_y)
    CN: np.ndarray | None = None
    yN: np.ndarray | None = None

    def stage(self, i: int) -> StageSensitivities:
        return StageSensitivities(
            self.A[i],
            self.B[i],
            self.Hx[i],
            self.Hu[i],
            self.dwx[i],
            self.dwh[i],
            None if self.C is None else self.C[i],
            None if self.y is None else self.y[i],
        )


# ---------------------------------------------------------------------------
# shared offsets


def _stack(comps: Sequence, batch_shape: tuple) -> np.ndarray:
    if not comps:
        return np.zeros(batch_shape + (0,))
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), batch_shape) for c in comps], axis=-1)


def trajectory_offsets(model, constraints, X, U, outputs=None):
    """Affine QP offsets, shared verbatim by both sensitivity policies.

    ``dwx_i = f(xhat_i, uhat_i) - xhat_{i+1}`` and ``dwh_i = h(xhat_i, uhat_i)``
    evaluate the nonlinear functions at the iterate, independent of anchors.
    """
    N = U.shape[0]
    xc = [X[:N, j] for j in range(model.n_x)]
    uc = [U[:, j] for j in range(model.n_u)]
    F = _stack(model.eval_fn(xc, uc), (N,))
    dwx = F - X[1:]
    if constraints is not None and constraints.n_h > 0:
        dwh = _stack(constraints.stage_fn(xc, uc), (N,))
    else:
        dwh = np.zeros((N, 0))
    xNc = list(X[N])
    if constraints is not None and constraints.n_hN > 0:
        dwhN = np.array([float(ad.value(v)) for v in constraints.terminal_fn(xNc)])
    else:
        dwhN = np.zeros(0)
    y = yN = None
    if outputs is not None:
        y = _stack(outputs.eval_fn(xc), (N,))
        yN = np.array([float(ad.value(v)) for v in outputs.eval_fn(xNc)])
    return dwx, dwh, dwhN, y, yN


# ---------------------------------------------------------------------------
# pointwise linearization


def _jac_block(model, constraints, outputs, xc, uc, batch_shape):
    """Dynamics / constraint / output Jacobians at a (batched) point."""
    A, B = fn_jacobians(model.eval_fn, xc, uc, batch_shape)
    if constraints is not None and constraints.n_h > 0:
        Hx, Hu = fn_jacobians(constraints.stage_fn, xc, uc, batch_shape)
    else:
        n_x, n_u = len(xc), len(uc)
        Hx = np.zeros(batch_shape + (0, n_x))
        Hu = np.zeros(batch_shape + (0, n_u))
    C = None
    if outputs is not None:
        n_x = len(xc)
        xd = ad.seed(xc, 0, n_x)
        C = ad.jacobian(outputs.eval_fn(xd), n_x, batch_shape)
    return A, B, Hx, Hu, C


def _terminal_jac(constraints, outputs, xNc, batch_shape=()):
    n_x = len(xNc)
    HxN = np.zeros(batch_shape + (0, n_x))
    if constraints is not None and constraints.n_hN > 0:
        xd = ad.seed(xNc, 0, n_x)
        HxN = ad.jacobian(constraints.terminal_fn(xd), n_x, batch_shape)
    CN = None
    if outputs is not None:
        xd = ad.seed(xNc, 0, n_x)
        CN = ad.jacobian(outputs.eval_fn(xd), n_x, batch_shape)
    return HxN, CN


def linearize_trajectory(model, constraints, X, U, outputs=None) -> TrajectorySensitivities:
    """Pointwise Jacobians at every stage of the iterate."""
    N = U.shape[0]
    xc = [X[:N, j] for j in range(model.n_x)]
    uc = [U[:, j] for j in range(model.n_u)]
    A, B, Hx, Hu, C = _jac_block(model, constraints, outputs, xc, uc, (N,))
    dwx, dwh, dwhN, y, yN = trajectory_offsets(model, constraints, X, U, outputs)
    HxN, CN = _terminal_jac(constraints, outputs, list(X[N]))
    return TrajectorySensitivities(A, B, Hx, Hu, dwx, dwh, HxN, dwhN, C, y, CN, yN)


def linearize_stage(model, constraints, x, u, x_next, outputs=None) -> StageSensitivities:
    """Single-stage pointwise linearization (see :func:`linearize_trajectory`)."""
    X = np.vstack([np.asarray(x, dtype=float), np.asarray(x_next, dtype=float)])
    U = np.asarray(u, dtype=float)[None, :]
    return linearize_trajectory(model, constraints, X, U, outputs).stage(0)


# ---------------------------------------------------------------------------
# ftc (integrated-Jacobian) path


def _segment_comps(P, Pa, nodes, cols):
    """Quadrature evaluation points ``pa + lam (p - pa)``, batched over nodes."""
    lam = nodes[None, :]
    return [Pa[:, j][:, None] + lam * (P[:, j] - Pa[:, j])[:, None] for j in range(cols)]


def _weighted_sum(J, weights):
    """Fixed-order weighted reduction over the node axis (axis 1)."""
    acc = weights[0] * J[:, 0]
    for j in range(1, len(weights)):
        acc = acc + weights[j] * J[:, j]
    return acc


def ftc_trajectory(model, constraints, X, U, Xa, Ua, rule, outputs=None) -> TrajectorySensitivities:
    """Integrated Jacobians along anchor-to-iterate segments, every stage."""
    N = U.shape[0]
    Xa = np.asarray(Xa, dtype=float)
    Ua = np.asarray(Ua, dtype=float)
    if Xa.shape != X.shape or Ua.shape != U.shape:
        raise DimensionError("anchor sequences must match the iterate shapes")
    xc = _segment_comps(X[:N], Xa[:N], rule.nodes, model.n_x)
    uc = _segment_comps(U, Ua, rule.nodes, model.n_u)
    n_nodes = len(rule.nodes)
    A, B, Hx, Hu, C = _jac_block(model, constraints, outputs, xc, uc, (N, n_nodes))
    w = rule.weights
    A, B = _weighted_sum(A, w), _weighted_sum(B, w)
    Hx, Hu = _weighted_sum(Hx, w), _weighted_sum(Hu, w)
    if C is not None:
        C = _weighted_sum(C, w)
    dwx, dwh, dwhN, y, yN = trajectory_offsets(model, constraints, X, U, outputs)
    # terminal rows, integrated along the terminal-state segment
    xNc = [Xa[N, j] + rule.nodes * (X[N, j] - Xa[N, j]) for j in range(model.n_x)]
    HxN, CN = _terminal_jac(constraints, outputs, xNc, (n_nodes,))
    HxN = _weighted_sum(HxN[None, ...], w)[0]
    if CN is not None:
        CN = _weighted_sum(CN[None, ...], w)[0]
    return TrajectorySensitivities(A, B, Hx, Hu, dwx, dwh, HxN, dwhN, C, y, CN, yN)


def ftc_stage(model, constraints, x, u, x_next, xa, ua, rule, outputs=None) -> StageSensitivities:
    """Single-stage integrated-Jacobian sensitivities."""
    X = np.vstack([np.asarray(x, dtype=float), np.asarray(x_next, dtype=float)])
    U = np.asarray(u, dtype=float)[None, :]
    Xa = np.vstack([np.asarray(xa, dtype=float), np.asarray(x_next, dtype=float)])
    Ua = np.asarray(ua, dtype=float)[None, :]
    return ftc_trajectory(model, constraints, X, U, Xa, Ua, rule, outputs).stage(0)


def ftc_embedding_residual(model, x, u, xa, ua, rule) -> float:
    """Defect of the quadrature-approximated factorization at ``(x, u)``.

    Exact integrals satisfy ``f(x,u) = Abar (x-xa) + Bbar (u-ua) + f(xa,ua)``;
    the returned max-norm residual measures the quadrature error (zero for
    dynamics affine in (x, u), for any rule).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xa = np.asarray(xa, dtype=float)
    ua = np.asarray(ua, dtype=float)
    xc = _segment_comps(x[None, :], xa[None, :], rule.nodes, model.n_x)
    uc = _segment_comps(u[None, :], ua[None, :], rule.nodes, model.n_u)
    A, B = fn_jacobians(model.eval_fn, xc, uc, (1, len(rule.nodes)))
    A = _weighted_sum(A, rule.weights)[0]
    B = _weighted_sum(B, rule.weights)[0]
    f_anchor = np.array([float(ad.value(v)) for v in model.eval_fn(list(xa), list(ua))])
    f_point = np.array([float(ad.value(v)) for v in model.eval_fn(list(x), list(u))])
    return float(np.max(np.abs(A @ (x - xa) + B @ (u - ua) + f_anchor - f_point)))
