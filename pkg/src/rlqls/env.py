"""Local-search environment: pick indices, solve the clamped sub-problem,
Metropolis-accept the candidate, reward by approximation ratio.

One step: (1) a policy proposes m distinct indices, (2) the clamped
sub-problem is solved (exactly by default), (3) the candidate is accepted
when it lowers the full energy and otherwise with probability
exp(-gamma * dE), (4) the reward is energy / reference ground-state energy
after the decision, (5) the next state keeps the graph features and shifts
the configuration history by one step.

With the exact sub-solver dE <= 0 always (the current assignment is itself a
candidate), so the uphill branch only fires under the fault-injection
solvers in rlqls.testing.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .ising import IsingProblem, energy, random_config
from .subproblem import apply_assignment, extract, solve_exact

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentState:
    """What the selection policy sees: the problem graph plus a one-step
    configuration history (previous == current right after a reset)."""

    graph_features: np.ndarray
    current_config: np.ndarray
    previous_config: np.ndarray

    @property
    def n(self) -> int:
        return self.current_config.size


@dataclass
class EnvConfig:
    """m: sub-problem size; gamma_accept: None means 100/|gse_ref| per problem."""

    m: int
    episode_len: int = 200
    gamma_accept: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ContractViolation(f"m must be >= 1, got {self.m}")
        if self.episode_len < 1:
            raise ContractViolation(f"episode_len must be >= 1, got {self.episode_len}")
        if self.gamma_accept is not None and not (
            math.isfinite(self.gamma_accept) and self.gamma_accept > 0
        ):
            raise ContractViolation("gamma_accept must be finite and > 0")


@dataclass
class StepRecord:
    """One environment transition, as consumed by the learner."""

    state_features: np.ndarray
    action: tuple
    behavior_log_prob: float
    reward: float
    energy: float
    accepted: bool
    done: bool


@dataclass
class EpisodeResult:
    records: list
    episode_return: float
    initial_energy: float
    best_energy: float
    final_state_features: np.ndarray


def graph_feature_vector(problem: IsingProblem) -> np.ndarray:
    """Flattened problem graph: couplings in (i, j)-sorted order, then fields."""
    iu, ju = np.triu_indices(problem.n, 1)
    vec = np.concatenate([problem.couplings[iu, ju], problem.fields])
    vec.setflags(write=False)
    return vec


def encode(state: AgentState) -> np.ndarray:
    """Feature vector [graph || current config || previous config], spins +-1.0."""
    return np.concatenate(
        [state.graph_features, state.current_config, state.previous_config]
    )


def validate_action(action, n: int, m: int) -> tuple:
    idx = tuple(int(q) for q in action)
    if len(idx) != m:
        raise ContractViolation(f"action has {len(idx)} indices, expected m={m}")
    if len(set(idx)) != len(idx):
        raise ContractViolation(f"action indices must be distinct, got {idx}")
    if any(q < 0 or q >= n for q in idx):
        raise ContractViolation(f"action index out of range for n={n}: {idx}")
    return idx


def metropolis_accept(delta_e: float, gamma: float, rng: np.random.Generator) -> bool:
    """Accept downhill moves outright, uphill with probability exp(-gamma*dE).

    dE == 0 lands in the uphill branch and is accepted with probability 1;
    the uphill branch always consumes exactly one uniform draw.
    """
    if delta_e < 0.0:
        return True
    return rng.random() < math.exp(-gamma * delta_e)


class QlsEnv:
    """Environment bound to one annotated problem.

    The problem must carry gse_ref (run the gse oracle first). A custom
    `solver(sub) -> (assignment, sub_energy)` can replace the exact one;
    that hook exists for fault injection in tests.
    """

    def __init__(self, problem: IsingProblem, cfg: EnvConfig, solver=None):
        if problem.gse_ref is None:
            raise ConfigurationError(
                f"problem {problem.id!r} has no gse_ref; annotate it first "
                "(gse_exhaustive/gse_tabu, or the `gse` CLI command)"
            )
        if problem.gse_ref == 0.0:
            raise ConfigurationError(
                f"problem {problem.id!r} has gse_ref == 0; the approximation "
                "ratio is undefined for it"
            )
        if cfg.m > problem.n:
            raise ContractViolation(f"m={cfg.m} exceeds problem size n={problem.n}")
        self.problem = problem
        self.cfg = cfg
        self.solver = solver or solve_exact
        self._graph = graph_feature_vector(problem)
        self._gse = float(problem.gse_ref)
        self.gamma = (
            cfg.gamma_accept
            if cfg.gamma_accept is not None
            else 100.0 / abs(self._gse)
        )

    @property
    def gse_ref(self) -> float:
        return self._gse

    def reset(self, rng: np.random.Generator) -> AgentState:
        config = random_config(self.problem.n, rng)
        return AgentState(
            graph_features=self._graph,
            current_config=config,
            previous_config=config.copy(),
        )

    def step(
        self, state: AgentState, action, rng: np.random.Generator
    ) -> tuple[AgentState, float, StepRecord]:
        idx = validate_action(action, self.problem.n, self.cfg.m)
        e_old = energy(self.problem, state.current_config)
        sub = extract(self.problem, state.current_config, idx)
        assignment, _ = self.solver(sub)
        candidate = apply_assignment(state.current_config, idx, assignment)
        e_new = energy(self.problem, candidate)
        delta = e_new - e_old

        accepted = metropolis_accept(delta, self.gamma, rng)
        if accepted:
            new_config = candidate
            e_after = e_new
        else:
            new_config = state.current_config
            e_after = e_old

        if e_after < self._gse and self.problem.gse_provenance == "tabu":
            log.warning(
                "problem %s: trial energy %.12g beats tabu gse_ref %.12g; "
                "updating the working reference",
                self.problem.id,
                e_after,
                self._gse,
            )
            self._gse = e_after

        reward = e_after / self._gse
        record = StepRecord(
            state_features=encode(state),
            action=idx,
            behavior_log_prob=math.nan,
            reward=reward,
            energy=e_after,
            accepted=accepted,
            done=False,
        )
        new_state = AgentState(
            graph_features=state.graph_features,
            current_config=new_config,
            previous_config=state.current_config,
        )
        return new_state, reward, record


def random_policy(
    state: AgentState, m: int, rng: np.random.Generator
) -> tuple[tuple, float]:
    """Baseline: m distinct indices uniform without replacement (ordered)."""
    n = state.n
    if m > n:
        raise ContractViolation(f"m={m} exceeds n={n}")
    idx = rng.choice(n, size=m, replace=False)
    log_prob = -float(np.log(np.arange(n, n - m, -1)).sum())
    return tuple(int(q) for q in idx), log_prob


def run_episode(
    problem: IsingProblem,
    cfg: EnvConfig,
    policy,
    rng: np.random.Generator,
    solver=None,
    init_rng: np.random.Generator | None = None,
) -> EpisodeResult:
    """Run one fixed-length episode; `policy(state) -> (action, log_prob)`.

    `rng` drives the acceptance draws; `init_rng` (defaulting to `rng`)
    drives the initial configuration, so callers can pair runs on identical
    starting points.
    """
    env = QlsEnv(problem, cfg, solver=solver)
    state = env.reset(init_rng if init_rng is not None else rng)
    initial_energy = energy(problem, state.current_config)
    best = initial_energy
    episode_return = 0.0
    records = []
    for t in range(cfg.episode_len):
        action, log_prob = policy(state)
        state, reward, record = env.step(state, action, rng)
        record.behavior_log_prob = log_prob
        record.done = t == cfg.episode_len - 1
        episode_return += reward
        best = min(best, record.energy)
        records.append(record)
    return EpisodeResult(
        records=records,
        episode_return=episode_return,
        initial_energy=initial_energy,
        best_energy=best,
        final_state_features=encode(state),
    )


def write_episode_trace(path, records) -> None:
    """CSV trace: step, energy, reward, accepted, action_indices."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "energy", "reward", "accepted", "action_indices"])
        for t, rec in enumerate(records, start=1):
            writer.writerow(
                [
                    t,
                    repr(rec.energy),
                    repr(rec.reward),
                    int(rec.accepted),
                    ";".join(str(q) for q in rec.action),
                ]
            )
