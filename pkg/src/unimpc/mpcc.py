"""Model-predictive contouring control on a smooth closed track.

The track is stored as sampled centerline vertices with per-vertex corridor
half-widths; a C2 cubic spline through the vertices (periodic for closed
tracks) gives the actual reference curve ``ref(theta)`` as a function of the
progress coordinate ``theta``.  Lag and contouring errors are the tangential
and normal components of the position error to ``ref(theta)``.  The spline
piece is selected from the *value* of ``theta`` (frozen during
differentiation), while ``theta`` itself enters the local polynomial, so the
errors are smooth along the whole track — a requirement for Newton-type
iterations, which limit-cycle on the kinks of a raw polyline reference.

The contouring OCP uses the single-track car with rate inputs, one extra
"input" column carrying the per-stage corridor slack (the dynamics ignore
it, so its Jacobian column is exactly zero), quadratic output cost on the
errors, and corridor rows ``±e_c - (w - margin) - slack <= 0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .model import (
    ConstraintSet,
    DynamicsModel,
    OutputMap,
    SingleTrackParams,
    box_constraints,
    discretize_rk4,
    single_track,
    with_ignored_inputs,
)
from .ocp import OcpProblem, OutputQuadraticCost, make_ocp


class TrackError(ValueError):
    pass


# ---------------------------------------------------------------------------
# track geometry


@dataclass(frozen=True)
class Track:
    s: np.ndarray  # (n,) chord arc length at the vertices, s[0] = 0
    xy: np.ndarray  # (n, 2) vertices; first == last for a closed track
    w: np.ndarray  # (n,) corridor half-width at each vertex
    tangents: np.ndarray  # (n-1, 2) unit chord tangent per segment
    seg_len: np.ndarray  # (n-1,)
    closed: bool
    cx: np.ndarray  # (n-1, 4) spline coefficients of x(theta), ascending powers
    cy: np.ndarray  # (n-1, 4) spline coefficients of y(theta), ascending powers

    @property
    def total_length(self) -> float:
        return float(self.s[-1])


def make_track(xy: np.ndarray, w: np.ndarray) -> Track:
    """Build a track from sampled vertices; arc length is re-derived.

    The reference curve is the cubic spline through the vertices in the
    chord-length parameter (periodic when the vertices close on themselves),
    so densely sampled input gives a centerline that is smooth to second
    order everywhere.
    """
    xy = np.asarray(xy, dtype=float)
    w = np.asarray(w, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 4:
        raise TrackError(f"need (n, 2) vertices with n >= 4, got {xy.shape}")
    if w.shape != (xy.shape[0],):
        raise TrackError("one half-width per vertex required")
    if np.any(w <= 0.0):
        raise TrackError("half-widths must be positive")
    d = np.diff(xy, axis=0)
    seg_len = np.hypot(d[:, 0], d[:, 1])
    if np.any(seg_len <= 0.0):
        raise TrackError("degenerate (zero-length) segment")
    s = np.concatenate([[0.0], np.cumsum(seg_len)])
    tangents = d / seg_len[:, None]
    closed = bool(np.hypot(*(xy[-1] - xy[0])) <= 1e-6)
    bc = "periodic" if closed else "natural"
    xy_fit = xy.copy()
    if closed:
        xy_fit[-1] = xy_fit[0]  # periodic fit wants bitwise-equal endpoints
    spx = CubicSpline(s, xy_fit[:, 0], bc_type=bc)
    spy = CubicSpline(s, xy_fit[:, 1], bc_type=bc)
    cx = spx.c[::-1].T.copy()  # SciPy stores highest power first
    cy = spy.c[::-1].T.copy()
    return Track(s=s, xy=xy, w=w, tangents=tangents, seg_len=seg_len, closed=closed, cx=cx, cy=cy)


def save_track(track: Track, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "x", "y", "w"])
        for i in range(track.xy.shape[0]):
            writer.writerow(
                [repr(float(track.s[i])), repr(float(track.xy[i, 0])), repr(float(track.xy[i, 1])), repr(float(track.w[i]))]
            )


def load_track(path, require_closed: bool = True) -> Track:
    """Read a ``s,x,y,w`` CSV track and validate its internal consistency."""
    path = Path(path)
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 4:
        raise TrackError(f"{path.name}: expected 4 columns (s,x,y,w), got {rows.shape[1]}")
    s_file, x, y, w = rows.T
    if np.any(np.diff(s_file) <= 0.0):
        raise TrackError(f"{path.name}: arc length must be strictly increasing")
    track = make_track(np.column_stack([x, y]), w)
    if float(np.max(np.abs(track.s - s_file))) > 1e-6:
        raise TrackError(f"{path.name}: stored arc length disagrees with vertex geometry")
    if require_closed and not track.closed:
        gap = float(np.hypot(*(track.xy[-1] - track.xy[0])))
        raise TrackError(f"{path.name}: track does not close (gap {gap:.3e} > 1e-6)")
    return track


def oval_track(straight: float = 1.8, radius: float = 0.382, halfwidth: float = 0.115, ds: float = 0.02) -> Track:
    """Stadium-shaped closed track: two straights joined by semicircles."""
    pts = [np.array([t, 0.0]) for t in np.arange(0.0, straight, ds)]
    n_arc = max(8, int(np.ceil(np.pi * radius / ds)))
    ang = -np.pi / 2 + np.pi * np.arange(n_arc) / n_arc
    pts += [np.array([straight + radius * np.cos(a), radius + radius * np.sin(a)]) for a in ang]
    pts += [np.array([t, 2 * radius]) for t in np.arange(straight, 0.0, -ds)]
    ang = np.pi / 2 + np.pi * np.arange(n_arc) / n_arc
    pts += [np.array([radius * np.cos(a), radius + radius * np.sin(a)]) for a in ang]
    pts.append(pts[0].copy())
    xy = np.vstack(pts)
    return make_track(xy, np.full(xy.shape[0], halfwidth))


# ---------------------------------------------------------------------------
# progress frame and error outputs


def _segment_of(track: Track, theta_val) -> np.ndarray:
    """Segment index for (wrapped) progress values; piecewise lookup."""
    idx = np.searchsorted(track.s, theta_val, side="right") - 1
    return np.clip(idx, 0, track.tangents.shape[0] - 1)


def track_frame(track: Track, theta):
    """Tangent, reference point, and half-width at progress ``theta``.

    The spline piece is selected from the value of ``theta``; within it the
    reference point and tangent are polynomials in ``theta``, so dual numbers
    propagate derivatives (including the tangent's rotation) through them.
    ``theta`` wraps modulo the track length on closed tracks.
    """
    th_val = np.asarray(ad.value(theta), dtype=float)
    L = track.total_length
    if track.closed:
        shift = L * np.floor(th_val / L)
        theta = theta - shift
        th_val = th_val - shift
    idx = _segment_of(track, th_val)
    dth = theta - track.s[idx]
    cx, cy = track.cx[idx], track.cy[idx]
    ref_x = cx[..., 0] + dth * (cx[..., 1] + dth * (cx[..., 2] + dth * cx[..., 3]))
    ref_y = cy[..., 0] + dth * (cy[..., 1] + dth * (cy[..., 2] + dth * cy[..., 3]))
    tx = cx[..., 1] + dth * (2.0 * cx[..., 2] + dth * (3.0 * cx[..., 3]))
    ty = cy[..., 1] + dth * (2.0 * cy[..., 2] + dth * (3.0 * cy[..., 3]))
    nrm = ad.sqrt(tx * tx + ty * ty)
    tx = tx / nrm
    ty = ty / nrm
    wlo = track.w[idx]
    whi = track.w[np.minimum(idx + 1, track.w.shape[0] - 1)]
    halfw = wlo + dth * ((whi - wlo) / track.seg_len[idx])
    return tx, ty, ref_x, ref_y, halfw


def contouring_errors(track: Track, px, py, theta):
    """Lag and contouring error of position ``(px, py)`` at progress ``theta``.

    The lag error is the tangential component of ``p - ref(theta)``; the
    contouring error is the component along the left normal ``(-ty, tx)``.
    """
    tx, ty, ref_x, ref_y, _ = track_frame(track, theta)
    ex = px - ref_x
    ey = py - ref_y
    e_lag = tx * ex + ty * ey
    e_con = -ty * ex + tx * ey
    return e_lag, e_con


def contouring_outputs(track: Track) -> OutputMap:
    """Output map ``y = [e_lag, e_con]`` over the contouring car state."""

    def fn(xc):
        e_lag, e_con = contouring_errors(track, xc[0], xc[1], xc[8])
        return [e_lag, e_con]

    return OutputMap(n_y=2, eval_fn=fn)


def project_progress(track: Track, p) -> float:
    """Arc-length parameter of the polyline point nearest to ``p``."""
    p = np.asarray(p, dtype=float)
    d = p[None, :] - track.xy[:-1]
    along = np.clip(d[:, 0] * track.tangents[:, 0] + d[:, 1] * track.tangents[:, 1], 0.0, track.seg_len)
    foot = track.xy[:-1] + along[:, None] * track.tangents
    dist2 = np.sum((p[None, :] - foot) ** 2, axis=1)
    j = int(np.argmin(dist2))
    return float(track.s[j] + along[j])


# ---------------------------------------------------------------------------
# contouring OCP


@dataclass(frozen=True)
class MpccWeights:
    """Scalar weights of the contouring cost.

    Reported stage cost:
    ``q_lag*e_l^2 + q_contour*e_c^2 + r_torque_rate*uT^2 + r_steer_rate*ud^2
    + eps_progress*uth^2 - q_progress*uth + slack_quad*sl^2 + slack_lin*sl``.
    """

    q_lag: float = 200.0
    q_contour: float = 20.0
    q_progress: float = 1.0
    r_torque_rate: float = 2e-3
    r_steer_rate: float = 0.2
    eps_progress: float = 2e-3
    slack_quad: float = 50.0
    slack_lin: float = 10.0

    def Qy(self) -> np.ndarray:
        return np.diag([self.q_lag, self.q_contour])

    def Raug(self) -> np.ndarray:
        R = np.zeros((5, 5))
        R[0, 0] = self.r_torque_rate
        R[1, 1] = self.r_steer_rate
        R[2, 2] = self.eps_progress
        R[3, 3] = self.slack_quad
        R[2, 4] = R[4, 2] = -self.q_progress / 2.0
        R[3, 4] = R[4, 3] = self.slack_lin / 2.0
        return R


@dataclass(frozen=True)
class MpccBounds:
    vx_min: float = 0.1
    vx_max: float = 1.8
    vy_max: float = 1.5  # |vy| box; keeps plans inside the tire model's validity region
    omega_max: float = 8.0  # |omega| box, same purpose
    torque_min: float = -1.0
    torque_max: float = 1.0
    steer_max: float = 0.40
    torque_rate_max: float = 20.0
    steer_rate_max: float = 4.0
    progress_rate_max: float = 4.0


def default_start_state(track: Track, vx: float = 0.3) -> np.ndarray:
    """Car at the track start, aligned with the first segment."""
    psi = float(np.arctan2(track.tangents[0, 1], track.tangents[0, 0]))
    x0 = np.zeros(9)
    x0[0:2] = track.xy[0]
    x0[2] = psi
    x0[3] = vx
    return x0


def contouring_model(params: SingleTrackParams = SingleTrackParams(), ts: float = 0.02, substeps: int = 1) -> DynamicsModel:
    """Discrete single-track car extended with the slack input column."""
    return with_ignored_inputs(discretize_rk4(single_track(params), ts, substeps), 1)


def build_mpcc_ocp(
    track: Track,
    N: int = 30,
    ts: float = 0.02,
    weights: MpccWeights = MpccWeights(),
    bounds: MpccBounds = MpccBounds(),
    params: SingleTrackParams = SingleTrackParams(),
    x0: np.ndarray | None = None,
    margin: float = 0.0,
    substeps: int = 1,
) -> OcpProblem:
    """Contouring OCP: car + slack input, error outputs, corridor rows.

    The corridor rows ``±e_c - (w - margin) - slack <= 0`` keep the car
    inside the track up to the nonnegative slack; the terminal constraint is
    the state box alone.
    """
    model = contouring_model(params, ts, substeps)
    if x0 is None:
        x0 = default_start_state(track)
    x0 = np.asarray(x0, dtype=float)

    inf = np.inf
    x_lb = np.array(
        [-inf, -inf, -inf, bounds.vx_min, -bounds.vy_max, -bounds.omega_max, bounds.torque_min, -bounds.steer_max, -inf]
    )
    x_ub = np.array(
        [inf, inf, inf, bounds.vx_max, bounds.vy_max, bounds.omega_max, bounds.torque_max, bounds.steer_max, inf]
    )
    u_lb = np.array([-bounds.torque_rate_max, -bounds.steer_rate_max, 0.0, 0.0])
    u_ub = np.array([bounds.torque_rate_max, bounds.steer_rate_max, bounds.progress_rate_max, inf])

    def corridor(xc, uc):
        _, e_con = contouring_errors(track, xc[0], xc[1], xc[8])
        _, _, _, _, halfw = track_frame(track, xc[8])
        room = halfw - margin
        slack = uc[3]
        return [e_con - room - slack, -e_con - room - slack]

    constraints = box_constraints(x_lb, x_ub, u_lb, u_ub, extra_stage=(2, corridor))
    cost = OutputQuadraticCost(outputs=contouring_outputs(track), Qy=weights.Qy(), Raug=weights.Raug())
    return make_ocp(model, constraints, cost, N, x0)
