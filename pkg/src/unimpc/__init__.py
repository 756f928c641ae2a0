"""Stage-structured nonlinear MPC where SQP and iterative LPV-MPC are two
configurations of one QP-generating pipeline.

A sensitivity policy chooses between pointwise Jacobians and integrated
(quadrature) Jacobians around anchor trajectories; everything else — the QP
template, offsets, solver, update loop, and closed-loop harness — is shared.
"""

from .config import RunConfig, default_config, load_config, resolve_config, save_config
from .engine import (
    AnchorContext,
    FixedIterations,
    IterationPolicy,
    KktResidual,
    SchedulingDelta,
    Trajectory,
    ZeroOrderPartition,
    cold_start,
    nlp_kkt_residual,
    outer_step,
    rti_step,
    shift_trajectory,
    solve_ocp,
    zero_order_expand,
    zero_order_reduce,
)
from .harness import (
    RunReport,
    build_policy,
    cart_pendulum_ocp,
    compare_policies,
    mpcc_ocp,
    run_closed_loop,
    solve_first_ocp,
    write_comparison,
    write_report,
)
from .model import (
    CartPendulumParams,
    ConstraintSet,
    DynamicsModel,
    OutputMap,
    SingleTrackParams,
    box_constraints,
    cart_pendulum,
    discretize_rk4,
    rollout,
    single_track,
    with_ignored_inputs,
)
from .mpcc import (
    MpccBounds,
    MpccWeights,
    Track,
    build_mpcc_ocp,
    contouring_errors,
    load_track,
    oval_track,
    project_progress,
    save_track,
)
from .ocp import (
    EXACT_LAGRANGIAN,
    GAUSS_NEWTON,
    OcpProblem,
    OutputQuadraticCost,
    QpData,
    QuadraticCost,
    assemble_qp,
    eval_nlp_cost,
    make_ocp,
)
from .qpsolve import QpSolution, QpTolerances, kkt_residuals_qp, solve_qp
from .sensitivity import (
    ConstantPoint,
    ExternalSequence,
    MeasuredStateLastInput,
    PreviousIterate,
    QuadratureRule,
    SensitivityPolicy,
    ZeroAnchors,
    ftc_embedding_residual,
    ftc_trajectory,
    gauss_legendre_rule,
    linearize_trajectory,
    rectangular_rule,
    select_anchors,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
