"""Actor-learner training loop with importance-weighted policy gradients.

Actors run episodes under immutable parameter snapshots and ship
trajectories to a single learner over a bounded queue. The learner
re-evaluates each stored action under the current parameters, forms the
one-step TD error

    delta_t = R_t + discount * V(s_{t+1}) * (1 - done_t) - V(s_t),

clips the importance ratio rho_t = min(rho_clip, pi/mu), and descends

    mean_over_trajectories( sum_t [ -rho_t * delta_t * log pi(a_t|s_t)
                                    + value_weight * delta_t^2 / 2
                                    - entropy_weight * H(softmax(logits_t)) ] )

where delta_t is treated as a fixed coefficient in the policy term and the
value target R_t + discount * V(s_{t+1}) is held fixed when differentiating
the value term (the usual semi-gradient).

With `actors = 1` collection is synchronous and the whole run, including the
training log, is byte-reproducible from the seed. The wall-clock column of
the log is therefore fixed at 0.0 in that mode; real timings always go to a
`timing.csv` sidecar.
"""

import csv
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .env import EnvConfig, encode, run_episode
from .errors import ConfigurationError, TrainingError
from .ising import annotate_instance_set, load_instance_set, make_instance_set
from .policy import (
    NetParams,
    OptimizerConfig,
    feature_dim,
    forward,
    forward_batch,
    init_optimizer,
    init_params,
    log_prob_of,
    logpi_logits_grad,
    optimizer_step,
    sample_action,
    save_checkpoint,
    _backward_from_heads,
    _forward_cache,
)
from .policy import PolicyOutput
from .seeding import substream
from .util import thread_cap

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = [
    "iteration",
    "mean_return",
    "mean_approx_ratio",
    "best_approx_ratio",
    "policy_loss",
    "value_loss",
    "entropy",
    "mean_rho",
    "version",
    "seconds",
]


@dataclass
class Trajectory:
    """One episode as recorded by an actor, replayable by the learner."""

    problem_id: str
    records: list
    behavior_version: int
    bootstrap_value: float
    final_state_features: np.ndarray


@dataclass
class TrainConfig:
    n: int
    m: int
    iterations: int
    seed: int = 0
    train_count: int = 1000
    train_seed: int = 1
    train_set_path: str = ""
    episodes_per_iteration: int = 100
    episode_len: int = 200
    actors: int = 1
    discount: float = 0.99
    rho_clip: float = 1.0
    value_weight: float = 0.5
    entropy_weight: float = 0.01
    reward_scale: float = 1.0
    learning_rate: float = 5e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    hidden: tuple = (256, 128)
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_episodes: int = 8

    def __post_init__(self):
        problems = validate_config_fields(self.__dict__)
        if problems:
            raise ConfigurationError("; ".join(problems))


def validate_config_fields(values: dict) -> list:
    """Return ALL invariant violations for a candidate config, not just the first."""
    errs = []

    def check(cond, msg):
        if not cond:
            errs.append(msg)

    check(values["n"] >= 2, f"n must be >= 2, got {values['n']}")
    check(1 <= values["m"] <= values["n"], f"m must be in [1, n], got {values['m']}")
    check(values["iterations"] >= 0, "iterations must be >= 0")
    check(values["train_count"] >= 1, "train_count must be >= 1")
    check(values["episodes_per_iteration"] >= 1, "episodes_per_iteration must be >= 1")
    check(values["episode_len"] >= 1, "episode_len must be >= 1")
    check(values["actors"] >= 1, "actors must be >= 1")
    check(0.0 <= values["discount"] <= 1.0, "discount must be in [0, 1]")
    check(values["rho_clip"] > 0.0, "rho_clip must be > 0")
    check(values["value_weight"] >= 0.0, "value_weight must be >= 0")
    check(values["entropy_weight"] >= 0.0, "entropy_weight must be >= 0")
    check(values["reward_scale"] > 0.0, "reward_scale must be > 0")
    check(values["learning_rate"] > 0.0, "learning_rate must be > 0")
    check(0.0 < values["rms_decay"] < 1.0, "rms_decay must be in (0, 1)")
    check(values["rms_eps"] > 0.0, "rms_eps must be > 0")
    check(
        len(values["hidden"]) >= 1 and all(int(h) >= 1 for h in values["hidden"]),
        "hidden must list positive layer sizes",
    )
    check(values["checkpoint_every"] >= 0, "checkpoint_every must be >= 0")
    check(values["eval_every"] >= 0, "eval_every must be >= 0")
    check(values["eval_episodes"] >= 1, "eval_episodes must be >= 1")
    return errs


@dataclass
class TrainLogRow:
    iteration: int
    mean_return: float
    mean_approx_ratio: float
    best_approx_ratio: float
    policy_loss: float
    value_loss: float
    entropy: float
    mean_rho: float
    version: int
    seconds: float


@dataclass
class EpisodeStreams:
    pick: np.random.Generator
    init: np.random.Generator
    policy: np.random.Generator
    accept: np.random.Generator


def episode_streams(seed: int, actor_id: int, episode_index: int) -> EpisodeStreams:
    """Named sub-streams for one episode, replayable in isolation."""
    return EpisodeStreams(
        pick=substream(seed, "pick", actor_id, episode_index),
        init=substream(seed, "init", actor_id, episode_index),
        policy=substream(seed, "policy", actor_id, episode_index),
        accept=substream(seed, "accept", actor_id, episode_index),
    )


def collect(
    actor_id: int,
    snapshot: NetParams,
    problem_pool: list,
    cfg: TrainConfig,
    streams: EpisodeStreams,
) -> Trajectory:
    """Run one episode under `snapshot` on a uniformly-picked pool problem."""
    problem = problem_pool[int(streams.pick.integers(len(problem_pool)))]
    env_cfg = EnvConfig(m=cfg.m, episode_len=cfg.episode_len)

    def pol(state):
        return sample_action(forward(snapshot, encode(state)), cfg.m, streams.policy)

    episode = run_episode(problem, env_cfg, pol, streams.accept, init_rng=streams.init)
    bootstrap = forward(snapshot, episode.final_state_features).value
    return Trajectory(
        problem_id=problem.id,
        records=episode.records,
        behavior_version=snapshot.version,
        bootstrap_value=bootstrap,
        final_state_features=episode.final_state_features,
    )


def compute_loss(theta: NetParams, batch: list, cfg: TrainConfig):
    """Loss, flat gradient, and diagnostics for a batch of trajectories.

    Scalar terms are summed over time and averaged over trajectories. The
    stored final-state features provide V(s_T) under the current theta; the
    bootstrap is dropped at steps flagged done.
    """
    if not batch:
        raise ConfigurationError("compute_loss needs a non-empty batch")

    rows = []
    for traj in batch:
        rows.extend(rec.state_features for rec in traj.records)
        rows.append(traj.final_state_features)
    features = np.vstack(rows)
    logits, values, activations = _forward_cache(theta, features)

    n_traj = len(batch)
    dlogits = np.zeros_like(logits)
    dvalues = np.zeros_like(values)
    policy_sum = 0.0
    value_sum = 0.0
    entropy_sum = 0.0
    rho_sum = 0.0
    n_steps = 0
    offset = 0
    for traj in batch:
        horizon = len(traj.records)
        traj_terms = 0.0
        for t, rec in enumerate(traj.records):
            row = offset + t
            lp = log_prob_of(PolicyOutput(logits=logits[row], value=0.0), rec.action)
            rho_raw = float(np.exp(lp - rec.behavior_log_prob))
            rho = min(cfg.rho_clip, rho_raw)
            v_next = 0.0 if rec.done else values[row + 1]
            delta = cfg.reward_scale * rec.reward + cfg.discount * v_next - values[row]

            x = logits[row] - _logsumexp(logits[row])
            p = np.exp(x)
            entropy = -float(p @ x)

            policy_sum += -rho * delta * lp
            value_sum += 0.5 * cfg.value_weight * delta * delta
            entropy_sum += entropy
            rho_sum += rho_raw
            n_steps += 1
            traj_terms += -rho * delta * lp + 0.5 * cfg.value_weight * delta * delta

            dlogits[row] = (-rho * delta) * logpi_logits_grad(logits[row], rec.action)
            dlogits[row] += cfg.entropy_weight * p * (x + entropy)
            dvalues[row] = -cfg.value_weight * delta
        if not np.isfinite(traj_terms):
            raise TrainingError(
                f"non-finite loss contribution from trajectory {traj.problem_id!r}"
            )
        offset += horizon + 1

    loss = (policy_sum + value_sum - cfg.entropy_weight * entropy_sum) / n_traj
    if not np.isfinite(loss):
        raise TrainingError("non-finite total loss")
    gradient = _backward_from_heads(theta, activations, dlogits / n_traj, dvalues / n_traj)
    diagnostics = {
        "policy_loss": policy_sum / n_traj,
        "value_loss": value_sum / n_traj,
        "entropy": entropy_sum / n_traj,
        "mean_rho": rho_sum / n_steps,
        "steps": n_steps,
    }
    return loss, gradient, diagnostics


def _logsumexp(z: np.ndarray) -> float:
    zmax = z.max()
    return float(zmax + np.log(np.exp(z - zmax).sum()))


def _batch_stats(batch: list) -> tuple[float, float, float]:
    returns = []
    finals = []
    bests = []
    for traj in batch:
        rewards = [rec.reward for rec in traj.records]
        returns.append(sum(rewards))
        finals.append(rewards[-1])
        bests.append(max(rewards))
    return float(np.mean(returns)), float(np.mean(finals)), float(np.max(bests))


def build_training_pool(cfg: TrainConfig) -> list:
    """Load the annotated training set if a path is given, else generate it."""
    if cfg.train_set_path:
        iset = load_instance_set(cfg.train_set_path)
        missing = [p.id for p in iset.problems if p.gse_ref is None]
        if missing:
            raise ConfigurationError(
                f"training set {cfg.train_set_path} has {len(missing)} problems "
                "without gse_ref; run the gse command on it first"
            )
        if any(p.n != cfg.n for p in iset.problems):
            raise ConfigurationError("training set problem size does not match config n")
        return iset.problems
    log.warning(
        "no training set supplied; generating %d annotated n=%d instances "
        "(seed %d) on the fly",
        cfg.train_count,
        cfg.n,
        cfg.train_seed,
    )
    iset = make_instance_set(cfg.n, cfg.train_count, cfg.train_seed, "train")
    return annotate_instance_set(iset, method="auto", seed=cfg.train_seed).problems


class _ActorPool:
    """Threaded trajectory producers feeding a bounded FIFO queue."""

    def __init__(self, cfg: TrainConfig, pool: list, snapshot: NetParams):
        self.cfg = cfg
        self.pool = pool
        self.queue = queue.Queue(maxsize=2 * cfg.episodes_per_iteration)
        self.stop = threading.Event()
        self._snapshot_lock = threading.Lock()
        self._snapshot = snapshot
        self.threads = [
            threading.Thread(target=self._run, args=(aid,), daemon=True)
            for aid in range(cfg.actors)
        ]

    def publish(self, snapshot: NetParams) -> None:
        with self._snapshot_lock:
            self._snapshot = snapshot

    def _latest(self) -> NetParams:
        with self._snapshot_lock:
            return self._snapshot

    def _run(self, actor_id: int) -> None:
        episode = 0
        while not self.stop.is_set():
            snapshot = self._latest()
            try:
                item = (
                    "ok",
                    collect(
                        actor_id,
                        snapshot,
                        self.pool,
                        self.cfg,
                        episode_streams(self.cfg.seed, actor_id, episode),
                    ),
                )
            except Exception as exc:  # surfaced to the learner for retry logic
                item = ("error", f"actor {actor_id} episode {episode}: {exc!r}")
            episode += 1
            while not self.stop.is_set():
                try:
                    self.queue.put(item, timeout=0.2)
                    break
                except queue.Full:
                    continue

    def start(self):
        for t in self.threads:
            t.start()

    def shutdown(self):
        self.stop.set()
        for t in self.threads:
            t.join(timeout=5.0)


def _gather_batch(actor_pool: _ActorPool, count: int) -> list:
    batch = []
    consecutive_errors = 0
    while len(batch) < count:
        kind, payload = actor_pool.queue.get()
        if kind == "ok":
            batch.append(payload)
            consecutive_errors = 0
        else:
            consecutive_errors += 1
            log.warning("actor failure, pulling a replacement trajectory: %s", payload)
            if consecutive_errors >= 3:
                raise TrainingError(f"persistent actor failures; last: {payload}")
    return batch


def learner_loop(
    cfg: TrainConfig,
    problems: list | None = None,
    initial_params: NetParams | None = None,
    out_dir=None,
):
    """Run the full training loop; returns (final params, train-log rows)."""
    pool = problems if problems is not None else build_training_pool(cfg)
    params = initial_params or init_params(
        feature_dim(cfg.n),
        cfg.n,
        tuple(cfg.hidden),
        substream(cfg.seed, "init-params"),
        feature_map="flip-gain",
    )
    opt_state = init_optimizer(params)
    opt_cfg = OptimizerConfig(
        learning_rate=cfg.learning_rate, decay=cfg.rms_decay, eps=cfg.rms_eps
    )
    actors = thread_cap(cfg.actors)
    if actors != cfg.actors:
        log.info("RLQLS_THREADS caps actors at %d (requested %d)", actors, cfg.actors)
        cfg = replace(cfg, actors=actors)
    deterministic = cfg.actors == 1
    rows: list[TrainLogRow] = []
    timings: list[tuple[int, float]] = []

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "ckpt_0.json"), params, cfg.n, cfg.m)

    actor_pool = None
    episode_counter = 0
    try:
        if not deterministic:
            actor_pool = _ActorPool(cfg, pool, params)
            actor_pool.start()

        for iteration in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            if deterministic:
                batch = []
                failures = 0
                while len(batch) < cfg.episodes_per_iteration:
                    streams = episode_streams(cfg.seed, 0, episode_counter)
                    episode_counter += 1
                    try:
                        batch.append(collect(0, params, pool, cfg, streams))
                        failures = 0
                    except Exception as exc:
                        failures += 1
                        log.warning("episode failed, retrying with the next "
                                    "stream: %r", exc)
                        if failures >= 3:
                            raise TrainingError(
                                f"persistent actor failures; last: {exc!r}"
                            ) from exc
            else:
                batch = _gather_batch(actor_pool, cfg.episodes_per_iteration)
                lag = params.version - min(t.behavior_version for t in batch)
                if lag > 0:
                    log.debug("iteration %d: max snapshot lag %d", iteration, lag)

            loss, gradient, diag = compute_loss(params, batch, cfg)
            params, opt_state = optimizer_step(params, gradient, opt_state, opt_cfg)
            params = replace(params, version=params.version + 1)
            if actor_pool is not None:
                actor_pool.publish(params)

            elapsed = time.perf_counter() - t0
            timings.append((iteration, elapsed))
            mean_return, mean_final, best_ratio = _batch_stats(batch)
            rows.append(
                TrainLogRow(
                    iteration=iteration,
                    mean_return=mean_return,
                    mean_approx_ratio=mean_final,
                    best_approx_ratio=best_ratio,
                    policy_loss=diag["policy_loss"],
                    value_loss=diag["value_loss"],
                    entropy=diag["entropy"],
                    mean_rho=diag["mean_rho"],
                    version=params.version,
                    seconds=0.0 if deterministic else elapsed,
                )
            )
            if iteration % 10 == 0 or iteration == cfg.iterations:
                log.info(
                    "iter %d/%d: mean_return %.3f, final ratio %.4f, loss %.5f",
                    iteration,
                    cfg.iterations,
                    mean_return,
                    mean_final,
                    loss,
                )
            if out_dir is not None and cfg.checkpoint_every > 0 and (
                iteration % cfg.checkpoint_every == 0
            ):
                save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{iteration}.json"), params, cfg.n, cfg.m
                )
            if out_dir is not None and cfg.eval_every > 0 and (
                iteration % cfg.eval_every == 0
            ):
                _cadence_eval(cfg, pool, params, iteration, out_dir)
    finally:
        if actor_pool is not None:
            actor_pool.shutdown()

    if out_dir is not None:
        save_checkpoint(
            os.path.join(out_dir, f"ckpt_{cfg.iterations}.json"), params, cfg.n, cfg.m
        )
        _write_timings(os.path.join(out_dir, "timing.csv"), timings)
    return params, rows


def _cadence_eval(cfg, pool, params, iteration, out_dir) -> None:
    """Cheap progress probe: a few fresh episodes under the current snapshot."""
    env_cfg = EnvConfig(m=cfg.m, episode_len=cfg.episode_len)
    rng = substream(cfg.seed, "cadence-eval", iteration)
    finals = []
    returns = []
    for k in range(min(cfg.eval_episodes, len(pool))):
        problem = pool[k % len(pool)]

        def pol(state):
            return sample_action(forward(params, encode(state)), cfg.m, rng)

        episode = run_episode(problem, env_cfg, pol, rng)
        returns.append(episode.episode_return)
        finals.append(episode.records[-1].reward)
    path = os.path.join(out_dir, "eval_log.csv")
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["iteration", "mean_return", "mean_final_ratio"])
        writer.writerow([iteration, repr(float(np.mean(returns))), repr(float(np.mean(finals)))])


def _write_timings(path, timings) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "seconds"])
        for iteration, seconds in timings:
            writer.writerow([iteration, f"{seconds:.6f}"])


def write_train_log(path, rows: list) -> None:
    """Train-log CSV; float cells use repr so equal runs give equal bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.iteration,
                    repr(row.mean_return),
                    repr(row.mean_approx_ratio),
                    repr(row.best_approx_ratio),
                    repr(row.policy_loss),
                    repr(row.value_loss),
                    repr(row.entropy),
                    repr(row.mean_rho),
                    row.version,
                    repr(row.seconds),
                ]
            )


# --- config files ---------------------------------------------------------------

_INT_FIELDS = {
    "n", "m", "iterations", "seed", "train_count", "train_seed",
    "episodes_per_iteration", "episode_len", "actors", "checkpoint_every",
    "eval_every", "eval_episodes",
}
_FLOAT_FIELDS = {
    "discount", "rho_clip", "value_weight", "entropy_weight", "reward_scale",
    "learning_rate", "rms_decay", "rms_eps",
}
_STR_FIELDS = {"train_set_path"}
_TUPLE_FIELDS = {"hidden"}
_REQUIRED = {"n", "m", "iterations"}


def parse_config_value(key: str, raw: str):
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    if key in _TUPLE_FIELDS:
        return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)
    if key in _STR_FIELDS:
        return raw
    raise KeyError(key)


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    """Parse a `key = value` config file; reports every problem, not just the first."""
    errors = []
    values: dict = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc

    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected `key = value`, got {stripped!r}")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        try:
            values[key] = parse_config_value(key, raw)
        except KeyError:
            errors.append(f"line {lineno}: unknown key {key!r}")
        except ValueError:
            errors.append(f"line {lineno}: bad value {raw!r} for key {key!r}")

    for key, value in (overrides or {}).items():
        if isinstance(value, str):
            try:
                value = parse_config_value(key, value)
            except KeyError:
                errors.append(f"override: unknown key {key!r}")
                continue
            except ValueError:
                errors.append(f"override: bad value for key {key!r}")
                continue
        values[key] = value

    missing = _REQUIRED - values.keys()
    for key in sorted(missing):
        errors.append(f"missing required key {key!r}")

    if not errors:
        candidate = {**_config_defaults(), **values}
        errors.extend(validate_config_fields(candidate))

    if errors:
        raise ConfigurationError(
            "invalid training config:\n  " + "\n  ".join(errors)
        )
    return TrainConfig(**values)


def _config_defaults() -> dict:
    import dataclasses

    return {
        f.name: f.default
        for f in dataclasses.fields(TrainConfig)
        if f.default is not dataclasses.MISSING
    }
