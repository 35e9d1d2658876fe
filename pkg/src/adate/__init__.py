"""Adaptive testing environments for a vehicle under test in a discretized overtaking scenario."""

__version__ = "0.1.0"

from .mdp import (  # noqa: E402
    SURROGATES,
    DiscreteChain,
    DriverModelParams,
    GridSpec,
    ValidationError,
    build_chain,
    desk_grid,
    make_grid,
    naturalistic_table,
    tiny_grid,
)
from .mixture import AdateConfig, MixtureWeights, adate_generate, solve_simplex_lsq  # noqa: E402
from .surrogate import QTable, backward_induction_q, critical_set, importance_policy  # noqa: E402
from .testing import (  # noqa: E402
    InitialDistribution,
    estimate,
    is_environment,
    nde_environment,
    required_tests,
    run_campaign,
)
