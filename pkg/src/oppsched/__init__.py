"""Opportunistic scheduling of multiclass users over i.i.d. time-varying channels.

Slotted stochastic simulator, exact one-step and averaged drifts, strong
fluid limits, stability regions, overload growth rates, and the optimal
fluid control, with a CLI reproducing the reference CDMA experiments.
"""

__version__ = "0.1.0"

from .control import OptimalControl, check_fluid_optimality, lower_bound_gap, optimal_control
from .drift import (
    AveragedDrift,
    NotErgodicError,
    ServeDistribution,
    SolverError,
    StationaryDistribution,
    TruncationError,
    averaged_drift,
    drift,
    serve_distribution,
    stationary_1d,
    stationary_multid,
)
from .fluid import (
    FluidTrajectory,
    StabilityReport,
    ThresholdResult,
    fluid_trajectory,
    growth_rates,
    is_max_stable,
    is_stable,
    load_rho,
    stability_threshold,
)
from .model import (
    ClassParams,
    ConfigError,
    RateParams,
    SystemConfig,
    bundled_config_path,
    load_config,
    mu_from_rates,
    save_config,
    validate,
    violations,
)
from .policy import (
    PolicySpec,
    ServeDecision,
    TieBreakRule,
    cmu_rule,
    custom,
    index_value,
    is_best_rate,
    is_brp,
    parse_policy,
    parse_tie,
    potential_improvement,
    proportionally_best,
    relative_best,
    score_based,
    select_user,
    weight_based,
)
from .simulator import (
    CostEstimate,
    Occupancy,
    SimTrajectory,
    estimate_mean_cost,
    rate_conservation_check,
    run_saturated,
    run_trajectory,
    step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
