"""Byzantine-tolerant decentralized TD learning: simulator, oracles and experiments."""

__version__ = "0.1.0"

from .adversary import AttackModel, gaussian_attack, krum_attack, poison_outgoing, trim_attack
from .aggregation import (
    AggregationRule,
    coordinate_median,
    fedavg,
    fltrust,
    krum,
    scclip,
    trimmed_mean,
    trimmed_mean_vec,
)
from .errors import AggregationError, BdtdError, ConfigurationError, ConvergenceError, SimulationError
from .features import (
    FeatureMap,
    ObservationFeatures,
    default_radius,
    project_ball,
    td_error,
)
from .mdp import (
    GridSpreadEnv,
    JointPolicy,
    NetworkedMdp,
    exact_value_function,
    induced_chain,
    make_grid_spread_env,
    make_random_mdp,
    sample_step,
    stationary_distribution,
    uniform_policy,
)
from .metrics import (
    FixedPointSpec,
    consensus_error,
    delta_metric,
    two_execution_gap,
    weight_support_bound,
    lambda_metric,
    lstd_fixed_point,
    msbe,
    sbe,
    verify_product_bound,
    weighted_fixed_point,
)
from .protocol import AgentRoster, RunTrace, StepSchedule, exclusion_filter, run_bdtd, step_size
