"""Barrier-function safety filters: min-norm QP controllers plus a robustness
simulation harness, with an adaptive cruise control case study."""

from .core import (
    Box,
    ConfigurationError,
    ControlAffineSystem,
    ControlLyapunovSpec,
    ExtendedClassK,
    SafeSetFamily,
    ZeroingBarrier,
    finite_difference_gradient,
    lie_derivatives,
    vc_value,
    zbf_residual,
    zcbf_admissible,
    zcbf_residual,
)
from .qp import (
    Branch,
    InfeasibleError,
    P1Instance,
    P2Instance,
    QPResult,
    RelativeDegreeError,
    SolverConsistencyError,
    WeightedObjective,
    kkt_verify,
    solve_p1,
    solve_p2,
    solve_weighted,
)
from .sim import (
    DivergenceError,
    InvarianceReport,
    IssLevel,
    LipschitzEstimate,
    Perturbation,
    PerturbationBoundError,
    SimulationAborted,
    Trajectory,
    check_forward_invariance,
    check_vc_decrease,
    estimate_lipschitz,
    iss_epsilon,
    simulate,
)
from .acc import (
    AccParams,
    AccState,
    LeadProfile,
    acc_barrier,
    acc_clf,
    acc_controller,
    acc_dynamics,
    acc_qp_matrices,
    acc_system,
    run_tradeoff_sweep,
    simulate_acc,
)

__version__ = "0.1.0"
