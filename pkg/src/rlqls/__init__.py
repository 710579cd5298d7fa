"""Decomposed local search for fully-connected Ising problems, with a
reinforcement-learned sub-problem selection policy benchmarked against
random selection."""

__version__ = "0.1.0"

from .ising import (
    InstanceSet,
    IsingProblem,
    TabuParams,
    annotate_instance_set,
    delta_energy,
    energy,
    generate_instance,
    gse_exhaustive,
    gse_tabu,
    load_instance_set,
    make_instance_set,
    random_config,
    save_instance_set,
)
from .subproblem import SubProblem, apply_assignment, extract, solve_exact, sub_energy
from .env import (
    AgentState,
    EnvConfig,
    QlsEnv,
    StepRecord,
    encode,
    metropolis_accept,
    random_policy,
    run_episode,
)
from .policy import (
    NetParams,
    PolicyOutput,
    backward,
    feature_dim,
    forward,
    greedy_action,
    init_params,
    load_checkpoint,
    log_prob_of,
    optimizer_step,
    sample_action,
    save_checkpoint,
)
from .trainer import TrainConfig, Trajectory, collect, compute_loss, learner_loop
from .bench import EvalReport, evaluate, random_selection, summarize, trained_selection
