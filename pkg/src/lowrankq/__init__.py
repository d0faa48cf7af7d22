"""Model-free value learning with low-rank Q-matrix factorizations.

Estimates the optimal state-action value function online, either as a dense
table or as a product of two thin factors updated one cell at a time, with
optional near-square reshaping of the Q-matrix so both factors stay small.
Ships native FrozenLake / Pendulum / Acrobot benchmarks, an exact value-
iteration oracle for the small MDP, a seeded experiment harness, and a CLI.
"""

from ._accel import BACKEND
from .agents import (
    AgentConfig,
    LowRankAlsAgent,
    LowRankSgdAgent,
    Schedule,
    TabularAgent,
    Transition,
    make_agent,
    parse_schedule,
)
from .environments import (
    AcrobotEnv,
    DiscretizedEnv,
    EnvSpec,
    FrozenLakeEnv,
    PendulumEnv,
    StepResult,
    make_env,
)
from .factor_model import (
    AlsSweepResult,
    FactorPair,
    NumericalDivergenceError,
    SvdSummary,
    als_sweep,
    build_target_matrix,
    frobenius_sq_error,
    init_factors,
    materialize,
    predict_cell,
    predict_cells,
    sgd_update,
    svd_energy,
)
from .harness import (
    EpisodeRecord,
    TrialResult,
    aggregate,
    run_episode,
    run_trial,
    run_trials,
)
from .index_space import (
    GridSpec,
    ProductSpace,
    ReshapePlan,
    action_cells,
    bin_center,
    cell_of,
    discretize,
    flatten,
    plan,
    unflatten,
)
from .mdp_oracle import (
    TabularMDP,
    bellman_backup,
    enumerate_frozenlake,
    optimal_actions,
    q_value_iteration,
)

__version__ = "0.1.0"
