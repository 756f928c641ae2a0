"""Typed run configuration with a flat INI surface.

One file fully determines a run: benchmark, policy, solver knobs, weights.
``load_config -> save_config -> load_config`` is a fixed point; values drawn
from the seed (the constant-anchor point) are resolved at load time and
written back on save, so a saved config replays bit-identically.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

BENCHMARKS = ("cart_pendulum", "mpcc")
MODES = ("full", "rti")
SENSITIVITIES = ("linearize", "ftc")
QUADRATURES = ("rectangular", "gauss_legendre")
ANCHORS = ("zero", "constant_point", "measured_state_last_input", "previous_iterate", "optimal")
HESSIANS = ("gauss_newton", "exact_lagrangian")
TERMINATIONS = ("kkt_residual", "scheduling_delta", "fixed_iterations")
TERMINAL_WEIGHTS = ("dare", "cost")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    benchmark: str = "cart_pendulum"
    mode: str = "full"
    steps: int = 80
    out_dir: str = "out"
    seed: int = 0
    shift_warm_start: bool = True  # shift the seed between closed-loop samples
    plant_mismatch: str = "none"  # hook; only "none" is implemented


@dataclass(frozen=True)
class OcpSection:
    ts: float = 0.01
    n: int = 20
    substeps: int = 1


@dataclass(frozen=True)
class PolicySection:
    sensitivity: str = "ftc"
    quadrature: str = "rectangular"
    quad_nodes: int = 20
    anchors: str = "previous_iterate"
    anchor_x: tuple = ()  # resolved constant anchor (empty unless constant_point)
    anchor_u: tuple = ()
    hessian: str = "gauss_newton"
    termination: str = "scheduling_delta"
    term_eps: float = 1e-6
    term_count: int = 10
    max_outer: int = 100
    zero_order: tuple = ()  # state indices decoupled from the QP
    zero_order_propagation: str = "linear"
    qp_tol: float = 1e-8
    qp_polish: bool = True


@dataclass(frozen=True)
class CartPendulumSection:
    q_diag: tuple = (100.0, 1.0, 100.0, 1.0)
    r: float = 10.0
    terminal: str = "cost"  # "cost" (W = Q) or "dare" (cost-to-go of the upright linearization)
    x0: tuple = (0.0, 0.0, -np.pi, 0.0)
    x_lb: tuple = (-5.0, -5.0, -2 * np.pi, -10.0)
    x_ub: tuple = (5.0, 5.0, 2 * np.pi, 10.0)
    u_lb: tuple = (-4.0,)
    u_ub: tuple = (4.0,)


@dataclass(frozen=True)
class MpccSection:
    track: str = "oval"  # "oval" or a CSV path
    margin: float = 0.0
    start_vx: float = 0.3
    q_lag: float = 200.0
    q_contour: float = 20.0
    q_progress: float = 1.0
    r_torque_rate: float = 2e-3
    # Steering-rate damping also regularises the otherwise nearly-free
    # alternating yaw weave, which destabilises the outer iteration.
    r_steer_rate: float = 0.2
    eps_progress: float = 2e-3
    slack_quad: float = 50.0
    slack_lin: float = 10.0
    vx_min: float = 0.1
    # Top speed close to the tire-limited cornering speed: entering a corner
    # much faster than the car can turn drives the linearized OCP infeasible.
    vx_max: float = 1.8
    vy_max: float = 1.5
    omega_max: float = 8.0
    torque_min: float = -1.0
    torque_max: float = 1.0
    steer_max: float = 0.40
    torque_rate_max: float = 20.0
    steer_rate_max: float = 4.0
    progress_rate_max: float = 4.0


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    ocp: OcpSection = field(default_factory=OcpSection)
    policy: PolicySection = field(default_factory=PolicySection)
    cart_pendulum: CartPendulumSection = field(default_factory=CartPendulumSection)
    mpcc: MpccSection = field(default_factory=MpccSection)


def default_config(benchmark: str = "cart_pendulum") -> RunConfig:
    if benchmark == "cart_pendulum":
        return RunConfig()
    if benchmark == "mpcc":
        return RunConfig(
            run=RunSection(benchmark="mpcc", mode="rti", steps=260),
            # Two integrator substeps keep the stiff lateral dynamics inside
            # the RK4 stability region at low forward speed.
            ocp=OcpSection(ts=0.02, n=30, substeps=2),
            policy=PolicySection(),
        )
    raise ConfigError(f"unknown benchmark {benchmark!r}")


# ---------------------------------------------------------------------------
# parsing helpers


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.raw = dict(parser[name]) if parser.has_section(name) else {}
        self.seen: set[str] = set()

    def _get(self, key: str):
        self.seen.add(key)
        return self.raw.get(key)

    def err(self, key: str, msg: str):
        raise ConfigError(f"[{self.name}] {key}: {msg}")

    def str_(self, key: str, default: str, choices=None) -> str:
        v = self._get(key)
        v = default if v is None else v.strip()
        if choices is not None and v not in choices:
            self.err(key, f"expected one of {choices}, got {v!r}")
        return v

    def int_(self, key: str, default: int, lo=None, hi=None) -> int:
        v = self._get(key)
        if v is None:
            out = default
        else:
            try:
                out = int(v)
            except ValueError:
                self.err(key, f"not an integer: {v!r}")
        if lo is not None and out < lo:
            self.err(key, f"must be >= {lo}")
        if hi is not None and out > hi:
            self.err(key, f"must be <= {hi}")
        return out

    def float_(self, key: str, default: float, lo=None) -> float:
        v = self._get(key)
        if v is None:
            out = default
        else:
            try:
                out = float(v)
            except ValueError:
                self.err(key, f"not a number: {v!r}")
        if lo is not None and not out >= lo:
            self.err(key, f"must be >= {lo}")
        return out

    def bool_(self, key: str, default: bool) -> bool:
        v = self._get(key)
        if v is None:
            return default
        v = v.strip().lower()
        if v in ("true", "1", "yes", "on"):
            return True
        if v in ("false", "0", "no", "off"):
            return False
        self.err(key, f"not a boolean: {v!r}")

    def floats(self, key: str, default: tuple, size=None) -> tuple:
        v = self._get(key)
        if v is None:
            out = tuple(float(x) for x in default)
        else:
            v = v.strip()
            try:
                out = tuple(float(x) for x in v.split(",")) if v else ()
            except ValueError:
                self.err(key, f"not a comma-separated number list: {v!r}")
        if size is not None and len(out) != size:
            self.err(key, f"expected {size} values, got {len(out)}")
        return out

    def ints(self, key: str, default: tuple) -> tuple:
        v = self._get(key)
        if v is None:
            return tuple(int(x) for x in default)
        v = v.strip()
        try:
            return tuple(int(x) for x in v.split(",")) if v else ()
        except ValueError:
            self.err(key, f"not a comma-separated integer list: {v!r}")

    def check_unknown(self):
        unknown = set(self.raw) - self.seen
        if unknown:
            raise ConfigError(f"[{self.name}] unknown keys: {sorted(unknown)}")


def _resolve_constant_anchor(cfg: RunConfig) -> RunConfig:
    """Draw the constant anchor point from the seed if not already recorded."""
    p = cfg.policy
    if p.anchors != "constant_point" or (p.anchor_x and p.anchor_u):
        return cfg
    if cfg.run.benchmark != "cart_pendulum":
        raise ConfigError("[policy] anchors: constant_point is only defined for cart_pendulum")
    cp = cfg.cart_pendulum
    rng = np.random.default_rng(cfg.run.seed)
    ax = tuple(float(v) for v in rng.uniform(cp.x_lb, cp.x_ub))
    au = tuple(float(v) for v in rng.uniform(cp.u_lb, cp.u_ub))
    return replace(cfg, policy=replace(p, anchor_x=ax, anchor_u=au))


def _validate(cfg: RunConfig) -> RunConfig:
    cp = cfg.cart_pendulum
    if any(lb >= ub for lb, ub in zip(cp.x_lb, cp.x_ub)):
        raise ConfigError("[cart_pendulum] x_lb must be elementwise below x_ub")
    if any(lb >= ub for lb, ub in zip(cp.u_lb, cp.u_ub)):
        raise ConfigError("[cart_pendulum] u_lb must be below u_ub")
    if not all(lb <= v <= ub for v, lb, ub in zip(cp.x0, cp.x_lb, cp.x_ub)):
        raise ConfigError("[cart_pendulum] x0 outside the state box")
    if any(q < 0 for q in cp.q_diag) or cp.r <= 0:
        raise ConfigError("[cart_pendulum] weights: q_diag >= 0 and r > 0 required")
    m = cfg.mpcc
    if not (0 <= m.margin < 0.115):
        raise ConfigError("[mpcc] margin must lie in [0, half-width)")
    if not (m.vx_min > 0 and m.vx_max > m.vx_min):
        raise ConfigError("[mpcc] speed bounds: 0 < vx_min < vx_max required")
    if cfg.run.plant_mismatch != "none":
        raise ConfigError("[run] plant_mismatch: only 'none' is implemented")
    if cfg.policy.sensitivity == "linearize" and cfg.policy.anchors != "previous_iterate":
        raise ConfigError("[policy] anchors are only meaningful with sensitivity = ftc")
    if cfg.run.benchmark == "mpcc" and cfg.policy.anchors == "constant_point":
        raise ConfigError("[policy] constant_point anchors are only defined for cart_pendulum")
    if cfg.policy.zero_order and cfg.policy.anchors == "optimal":
        raise ConfigError("[policy] zero_order cannot be combined with optimal anchors")
    return _resolve_constant_anchor(cfg)


def resolve_config(cfg: RunConfig) -> RunConfig:
    """Validate a programmatically built config and resolve seeded fields."""
    return _validate(cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"run", "ocp", "policy", "cart_pendulum", "mpcc"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")

    r = _Section(parser, "run")
    run = RunSection(
        benchmark=r.str_("benchmark", "cart_pendulum", BENCHMARKS),
        mode=r.str_("mode", "full", MODES),
        steps=r.int_("steps", 80, lo=1),
        out_dir=r.str_("out_dir", "out"),
        seed=r.int_("seed", 0, lo=0),
        shift_warm_start=r.bool_("shift_warm_start", True),
        plant_mismatch=r.str_("plant_mismatch", "none"),
    )
    r.check_unknown()

    o = _Section(parser, "ocp")
    dflt = default_config(run.benchmark).ocp
    ocp = OcpSection(
        ts=o.float_("ts", dflt.ts, lo=1e-6),
        n=o.int_("n", dflt.n, lo=1),
        substeps=o.int_("substeps", dflt.substeps, lo=1),
    )
    o.check_unknown()

    p = _Section(parser, "policy")
    policy = PolicySection(
        sensitivity=p.str_("sensitivity", "ftc", SENSITIVITIES),
        quadrature=p.str_("quadrature", "rectangular", QUADRATURES),
        quad_nodes=p.int_("quad_nodes", 20, lo=1),
        anchors=p.str_("anchors", "previous_iterate", ANCHORS),
        anchor_x=p.floats("anchor_x", ()),
        anchor_u=p.floats("anchor_u", ()),
        hessian=p.str_("hessian", "gauss_newton", HESSIANS),
        termination=p.str_("termination", "scheduling_delta", TERMINATIONS),
        term_eps=p.float_("term_eps", 1e-6, lo=0.0),
        term_count=p.int_("term_count", 10, lo=1),
        max_outer=p.int_("max_outer", 100, lo=1),
        zero_order=p.ints("zero_order", ()),
        zero_order_propagation=p.str_("zero_order_propagation", "linear", ("linear", "nonlinear")),
        qp_tol=p.float_("qp_tol", 1e-8, lo=1e-14),
        qp_polish=p.bool_("qp_polish", True),
    )
    p.check_unknown()

    c = _Section(parser, "cart_pendulum")
    cart = CartPendulumSection(
        q_diag=c.floats("q_diag", CartPendulumSection.q_diag, size=4),
        r=c.float_("r", CartPendulumSection.r),
        terminal=c.str_("terminal", "cost", TERMINAL_WEIGHTS),
        x0=c.floats("x0", CartPendulumSection.x0, size=4),
        x_lb=c.floats("x_lb", CartPendulumSection.x_lb, size=4),
        x_ub=c.floats("x_ub", CartPendulumSection.x_ub, size=4),
        u_lb=c.floats("u_lb", CartPendulumSection.u_lb, size=1),
        u_ub=c.floats("u_ub", CartPendulumSection.u_ub, size=1),
    )
    c.check_unknown()

    mm = _Section(parser, "mpcc")
    md = MpccSection
    mpcc = MpccSection(
        track=mm.str_("track", md.track),
        margin=mm.float_("margin", md.margin, lo=0.0),
        start_vx=mm.float_("start_vx", md.start_vx, lo=0.0),
        q_lag=mm.float_("q_lag", md.q_lag, lo=0.0),
        q_contour=mm.float_("q_contour", md.q_contour, lo=0.0),
        q_progress=mm.float_("q_progress", md.q_progress, lo=0.0),
        r_torque_rate=mm.float_("r_torque_rate", md.r_torque_rate, lo=0.0),
        r_steer_rate=mm.float_("r_steer_rate", md.r_steer_rate, lo=0.0),
        eps_progress=mm.float_("eps_progress", md.eps_progress, lo=0.0),
        slack_quad=mm.float_("slack_quad", md.slack_quad, lo=0.0),
        slack_lin=mm.float_("slack_lin", md.slack_lin, lo=0.0),
        vx_min=mm.float_("vx_min", md.vx_min),
        vx_max=mm.float_("vx_max", md.vx_max),
        vy_max=mm.float_("vy_max", md.vy_max, lo=0.0),
        omega_max=mm.float_("omega_max", md.omega_max, lo=0.0),
        torque_min=mm.float_("torque_min", md.torque_min),
        torque_max=mm.float_("torque_max", md.torque_max),
        steer_max=mm.float_("steer_max", md.steer_max, lo=0.0),
        torque_rate_max=mm.float_("torque_rate_max", md.torque_rate_max, lo=0.0),
        steer_rate_max=mm.float_("steer_rate_max", md.steer_rate_max, lo=0.0),
        progress_rate_max=mm.float_("progress_rate_max", md.progress_rate_max, lo=0.0),
    )
    mm.check_unknown()

    if mpcc.track != "oval":
        tp = Path(mpcc.track)
        if not tp.is_absolute():
            tp = path.parent / tp
        if not tp.is_file():
            raise ConfigError(f"[mpcc] track: file not found: {tp}")
        mpcc = replace(mpcc, track=str(tp))

    return _validate(RunConfig(run=run, ocp=ocp, policy=policy, cart_pendulum=cart, mpcc=mpcc))


def save_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for name, section in asdict(cfg).items():
        parser[name] = {k: _fmt(v) for k, v in section.items()}
    with open(path, "w") as fh:
        parser.write(fh)
