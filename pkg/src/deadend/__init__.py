"""Dead-end discovery for offline decision processes.

Estimate, exactly or from offline data, how certainly each treatment leads
to an unrecoverable region of the state space; flag risky states and
treatments; cap policies by the security condition; and reproduce the
cohort-level analyses on simulated data.
"""

from .mdp import (
    DualKind,
    TabularMDP,
    Terminal,
    Trajectory,
    Transition,
    ValidationReport,
    build_dual_mdp,
    trajectory_return,
    validate_mdp,
)
from .solve import (
    OutcomeProbs,
    QTable,
    SpecialStateSets,
    TheoremReport,
    bellman_backup,
    classify_special_states,
    confirm_termination,
    outcome_probabilities,
    termination_probabilities,
    value_iteration,
    verify_theorem1,
)
from .lifegate import LifeGateLayout, build_lifegate, cells_of_kind, render_value_grid, state_index
from .cohort import (
    CohortSpec,
    GeneratedMDP,
    ObservationEmitter,
    emit_observations,
    epsilon_greedy_policy,
    generate_mdp,
    harmful_biased_policy,
    rollout_behavior,
    save_bundle,
    uniform_policy,
)
from .data import (
    SplitSpec,
    TransitionBuffers,
    load_jsonl,
    save_jsonl,
    split,
    stratified_minibatch,
)
from .encoder import (
    EncoderConfig,
    HistoryEncoder,
    OneHotEncoder,
    SCModel,
    build_window,
    train_sc,
    validation_mse,
)
from .net import MLP, Adam, gradient_check
from .learn import (
    DQNConfig,
    QNetwork,
    dataset_visit_counts,
    double_q_targets,
    fit_double_q,
    q_values,
    tabular_q_learning,
)
from .flags import (
    Basis,
    FlagLevel,
    Level,
    SecurityReport,
    Thresholds,
    certify_security,
    flag_state,
    flag_treatment,
    secure_policy,
)
from .analysis import (
    AlignmentWindow,
    FlaggedCohort,
    first_flag_alignment,
    flag_duration,
    flag_emergence,
    flag_with_networks,
    flag_with_tables,
    value_gap,
)
from . import errors

__version__ = "0.1.0"
