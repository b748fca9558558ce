"""Crowd navigation planning toolkit.

Gradient-based receding-horizon planning among pedestrians: a differentiable
multimodal crowd predictor, an interaction (invasiveness) cost with exact
gradients, a Hamilton-Jacobi backward-reachable-tube safety filter, baseline
planners, and a seeded simulator with benchmark metrics.
"""

from .dynamics import (
    A_MAX_DEFAULT,
    DT_DEFAULT,
    V_H_MAX_DEFAULT,
    V_R_MAX_DEFAULT,
    HumanControl,
    HumanState,
    RelativeState,
    RobotControl,
    RobotState,
    StepParams,
    relative_state,
    rollout_robot,
    step_human,
    step_robot,
)
from .errors import (
    GridFormatError,
    InvalidInputError,
    MetricUnavailableError,
    SolverDivergedError,
)
from .predictor import (
    AnalyticCrowdPredictor,
    GaussianMode,
    InteractionHistory,
    MultimodalPrediction,
    PredictorConfig,
    log_density,
    mixture_mean_controls,
    mode_means,
)
from .interaction import InteractionCostResult, j_int, j_int_baseline, j_int_value
from .reachability import (
    GridSpec,
    ReachabilityParams,
    SafeSetQuery,
    ValueFunction,
    default_grid,
    load_grid,
    multi_agent_value,
    safe_control_constraint,
    save_grid,
    solve_brt,
    target_level,
    value_at,
)
from .planner import (
    AttentionConfig,
    Plan,
    PlannerConfig,
    PlanStats,
    SolverConfig,
    attention_filter,
    build_problem,
    plan_step,
    solve,
    warm_start,
)
from .baselines import (
    DecoupledPlanner,
    MctsConfig,
    MctsPlanner,
    RrtConfig,
    RrtStarPlanner,
    plan_decoupled,
    plan_mcts,
    plan_rrtstar,
)
from .sim import (
    HumanSimConfig,
    Scenario,
    Trace,
    load_scenario,
    load_trace,
    random_scenario,
    run_benchmark,
    run_episode,
    save_scenario,
    save_trace,
)
from .metrics import count_collisions, metric_mpe, metric_mre, metric_msd

__version__ = "0.1.0"
