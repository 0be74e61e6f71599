"""capest: measurement-driven wireless link-capacity estimation.

Links report running service-time means from a deterministic CSMA/CA
simulator; residual capacities feed centralized max-min or weighted-fair
allocators; a saturated-WLAN fixed-point model with convergence checks covers
the single-collision-domain case analytically.
"""

from .allocator import (
    RATE_FLOOR,
    AllocationState,
    AllocatorError,
    check_constraint,
    flow_incidence,
    init_state,
    link_arrival_rates,
    maxmin_step,
    weighted_step,
)
from .estimator import (
    NoMeasurementError,
    ResidualEstimate,
    ServiceEstimator,
    lost_packet_service_time,
)
from .fixedpoint import (
    FixedPointResult,
    ModelDomainError,
    OverloadError,
    ShapeReport,
    WlanModel,
    backoff_from_mac,
    canonical_backoff,
    capest_iterate,
    f_beta,
    f_beta_prime,
    find_fixed_point,
    psi,
    solve_attempt_rate,
    verify_shape,
)
from .macsim import (
    AccessPolicy,
    DcfPolicy,
    IterationMeasurements,
    LinkLoad,
    LinkMeasurements,
    MacConfig,
    PriorityRandomAccess,
    ProbeResult,
    SimulationError,
    StopRule,
    access_policy,
    backlogged_pair_run,
    path_capacity_probe,
    run_iteration,
)
from .oracle import (
    FeasibilityVerdict,
    MaxMinSolution,
    OracleError,
    is_feasible,
    maxmin_oracle,
)
from .topo import (
    Flow,
    LirMeasurement,
    Topology,
    TopologyError,
    builtin_topology,
    classify_lir,
    load_topology,
    neighborhood,
    random_topology,
    save_topology,
)

__version__ = "0.1.0"

__all__ = [
    "AccessPolicy",
    "AllocationState",
    "AllocatorError",
    "DcfPolicy",
    "FeasibilityVerdict",
    "FixedPointResult",
    "Flow",
    "IterationMeasurements",
    "LinkLoad",
    "LinkMeasurements",
    "LirMeasurement",
    "MacConfig",
    "MaxMinSolution",
    "ModelDomainError",
    "NoMeasurementError",
    "OracleError",
    "OverloadError",
    "PriorityRandomAccess",
    "ProbeResult",
    "RATE_FLOOR",
    "ResidualEstimate",
    "ServiceEstimator",
    "ShapeReport",
    "SimulationError",
    "StopRule",
    "Topology",
    "TopologyError",
    "WlanModel",
    "access_policy",
    "backlogged_pair_run",
    "backoff_from_mac",
    "builtin_topology",
    "canonical_backoff",
    "capest_iterate",
    "check_constraint",
    "classify_lir",
    "f_beta",
    "f_beta_prime",
    "find_fixed_point",
    "flow_incidence",
    "init_state",
    "is_feasible",
    "link_arrival_rates",
    "load_topology",
    "lost_packet_service_time",
    "maxmin_oracle",
    "maxmin_step",
    "neighborhood",
    "path_capacity_probe",
    "psi",
    "random_topology",
    "run_iteration",
    "save_topology",
    "solve_attempt_rate",
    "verify_shape",
    "weighted_step",
]
