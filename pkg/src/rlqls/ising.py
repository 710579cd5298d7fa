"""Fully-connected Ising problems: representation, energies, generation, oracles.

A problem is E(s) = sum_{i<j} J_ij s_i s_j + sum_i h_i s_i over spins
s_i in {-1, +1}. Couplings are stored once per unordered pair in a dense
strictly upper-triangular matrix (problems here are fully connected).
Reference ground-state energies come from exhaustive enumeration (n <= 24)
or from a seeded multi-restart tabu search.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import CapacityError, ConfigurationError, ContractViolation
from .seeding import substream

log = logging.getLogger(__name__)

EXHAUSTIVE_MAX_N = 24
ENUM_CHUNK = 1 << 16


@dataclass(frozen=True)
class IsingProblem:
    """Immutable problem instance.

    couplings is (n, n) float64 with J_ij at [i, j] for i < j and zeros
    elsewhere; fields is the length-n vector of linear terms.
    """

    n: int
    couplings: np.ndarray
    fields: np.ndarray
    id: str
    gse_ref: float | None = None
    gse_provenance: str | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ContractViolation(f"problem size must be >= 1, got {self.n}")
        couplings = np.ascontiguousarray(self.couplings, dtype=np.float64)
        fields = np.ascontiguousarray(self.fields, dtype=np.float64)
        if couplings.shape != (self.n, self.n):
            raise ContractViolation(
                f"couplings must be ({self.n}, {self.n}), got {couplings.shape}"
            )
        if fields.shape != (self.n,):
            raise ContractViolation(f"fields must be ({self.n},), got {fields.shape}")
        if np.any(np.tril(couplings) != 0.0):
            raise ContractViolation("couplings must be strictly upper-triangular")
        if not (np.all(np.isfinite(couplings)) and np.all(np.isfinite(fields))):
            raise ContractViolation("couplings and fields must be finite")
        couplings.setflags(write=False)
        fields.setflags(write=False)
        object.__setattr__(self, "couplings", couplings)
        object.__setattr__(self, "fields", fields)

    @cached_property
    def sym(self) -> np.ndarray:
        """Symmetric coupling matrix J + J^T (zero diagonal), for local fields."""
        s = self.couplings + self.couplings.T
        s.setflags(write=False)
        return s


@dataclass
class InstanceSet:
    """A reproducible batch of problems generated from one seed."""

    problems: list
    seed: int
    kind: str

    def __post_init__(self):
        ids = [p.id for p in self.problems]
        if len(set(ids)) != len(ids):
            raise ContractViolation("instance ids must be unique within a set")


def random_config(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random spin configuration, entries +-1.0."""
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def _check_config(problem: IsingProblem, config: np.ndarray) -> np.ndarray:
    config = np.asarray(config, dtype=np.float64)
    if config.shape != (problem.n,):
        raise ContractViolation(
            f"config has shape {config.shape}, expected ({problem.n},)"
        )
    return config


def energy(problem: IsingProblem, config: np.ndarray) -> float:
    """Full energy of a configuration."""
    config = _check_config(problem, config)
    return float(config @ (problem.couplings @ config) + problem.fields @ config)


def delta_energy(problem: IsingProblem, config: np.ndarray, flips) -> float:
    """Energy change from flipping the given set of distinct spins.

    Cost is O(|flips| * n); flips are applied in ascending index order on a
    scratch copy, the input configuration is left untouched.
    """
    config = _check_config(problem, config)
    flip_list = sorted(int(i) for i in flips)
    if len(set(flip_list)) != len(flip_list):
        raise ContractViolation("flip indices must be distinct")
    if flip_list and (flip_list[0] < 0 or flip_list[-1] >= problem.n):
        raise ContractViolation(f"flip index out of range for n={problem.n}")
    s = config.copy()
    sym = problem.sym
    total = 0.0
    for i in flip_list:
        local = sym[i] @ s + problem.fields[i]
        total += -2.0 * s[i] * local
        s[i] = -s[i]
    return total


def generate_instance(
    n: int, rng: np.random.Generator, instance_id: str | None = None
) -> IsingProblem:
    """Fully-connected instance with J_ij and h_i drawn i.i.d. uniform on (-1, 1).

    Draw order is fixed (pair couplings in (i, j)-sorted order, then fields),
    so a given generator state always yields the same instance.
    """
    if n < 2:
        raise ContractViolation(f"generation needs n >= 2, got {n}")
    pair_values = rng.uniform(-1.0, 1.0, size=n * (n - 1) // 2)
    fields = rng.uniform(-1.0, 1.0, size=n)
    couplings = np.zeros((n, n))
    couplings[np.triu_indices(n, 1)] = pair_values
    if instance_id is None:
        digest = hashlib.sha256(pair_values.tobytes() + fields.tobytes()).hexdigest()
        instance_id = f"n{n}-{digest[:8]}"
    return IsingProblem(n=n, couplings=couplings, fields=fields, id=instance_id)


def make_instance_set(n: int, count: int, seed: int, kind: str) -> InstanceSet:
    """Generate `count` instances from one named stream; bit-reproducible."""
    if count < 1:
        raise ContractViolation(f"count must be >= 1, got {count}")
    rng = substream(seed, "instances", kind)
    problems = [
        generate_instance(n, rng, instance_id=f"{kind}-n{n}-s{seed}-i{k:04d}")
        for k in range(count)
    ]
    return InstanceSet(problems=problems, seed=seed, kind=kind)


def _codes_to_spins(codes: np.ndarray, n: int) -> np.ndarray:
    """Decode integer codes to +-1 spin rows; bit a = spin a, bit 0 = spin 0."""
    bits = (codes[:, None] >> np.arange(n, dtype=np.uint32)) & 1
    return bits.astype(np.float64) * 2.0 - 1.0


def _batch_energies(problem: IsingProblem, spins: np.ndarray) -> np.ndarray:
    t = spins @ problem.couplings.T
    return (spins * t).sum(axis=1) + spins @ problem.fields


def gse_exhaustive(
    problem: IsingProblem, use_symmetry: bool = False
) -> tuple[float, np.ndarray]:
    """Exact ground-state energy and one minimizer by enumerating all 2^n states.

    With `use_symmetry` (valid only when all fields are zero) only half the
    states are enumerated, relying on E(s) = E(-s); the minimum energy is
    unchanged. Ties are broken toward the smallest binary code.
    """
    n = problem.n
    if n > EXHAUSTIVE_MAX_N:
        raise CapacityError(
            f"n={n} exceeds the exhaustive cap of {EXHAUSTIVE_MAX_N}; use gse_tabu"
        )
    if use_symmetry and np.any(problem.fields != 0.0):
        raise ContractViolation("use_symmetry requires all fields to be zero")
    total = 1 << (n - 1 if use_symmetry else n)
    best_e = np.inf
    best_code = 0
    for start in range(0, total, ENUM_CHUNK):
        codes = np.arange(start, min(start + ENUM_CHUNK, total), dtype=np.uint32)
        energies = _batch_energies(problem, _codes_to_spins(codes, n))
        k = int(np.argmin(energies))
        if energies[k] < best_e:
            best_e = energies[k]
            best_code = int(codes[k])
    config = _codes_to_spins(np.array([best_code], dtype=np.uint32), n)[0]
    return energy(problem, config), config


@dataclass(frozen=True)
class TabuParams:
    """Single-flip tabu search settings; iters_per_restart=None means 50*n."""

    tenure: int = 20
    iters_per_restart: int | None = None
    restarts: int = 10


def gse_tabu(
    problem: IsingProblem,
    params: TabuParams | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Best energy found by multi-restart single-flip tabu search.

    Moves pick the best non-tabu flip; a tabu flip is allowed when it improves
    the restart's best-so-far energy (aspiration). When every move is tabu and
    none aspirates, the move whose tabu expires soonest is forced. All
    restarts advance in lock-step as rows of one array, which is equivalent
    to running them sequentially. Deterministic given the generator.
    """
    if problem.n < 2:
        raise ContractViolation("tabu search needs n >= 2")
    if rng is None:
        raise ContractViolation("gse_tabu requires a seeded generator")
    params = params or TabuParams()
    n = problem.n
    iters = params.iters_per_restart or 50 * n
    restarts = params.restarts
    sym = problem.sym
    fields = problem.fields

    spins = rng.integers(0, 2, size=(restarts, n)).astype(np.float64) * 2.0 - 1.0
    lam = spins @ sym + fields
    energies = _batch_energies(problem, spins)
    best_e = energies.copy()
    best_spins = spins.copy()
    tabu_until = np.zeros((restarts, n), dtype=np.int64)
    rows = np.arange(restarts)

    for it in range(iters):
        delta = -2.0 * spins * lam
        allowed = (tabu_until <= it) | (energies[:, None] + delta < best_e[:, None])
        candidates = np.where(allowed, delta, np.inf)
        idx = np.argmin(candidates, axis=1)
        stuck = ~allowed[rows, idx]
        if stuck.any():
            idx = np.where(stuck, np.argmin(tabu_until, axis=1), idx)
        flipped = spins[rows, idx]
        energies = energies + delta[rows, idx]
        spins[rows, idx] = -flipped
        lam = lam + (-2.0 * flipped)[:, None] * sym[idx, :]
        tabu_until[rows, idx] = it + 1 + params.tenure
        improved = energies < best_e
        if improved.any():
            best_e = np.where(improved, energies, best_e)
            best_spins[improved] = spins[improved]

    winner = int(np.argmin(best_e))
    config = best_spins[winner].copy()
    return energy(problem, config), config


def annotate_instance_set(
    iset: InstanceSet,
    method: str = "auto",
    seed: int = 0,
    tabu_params: TabuParams | None = None,
) -> InstanceSet:
    """Fill gse_ref/gse_provenance for every problem in the set.

    `auto` picks exhaustive enumeration for n <= 24 and tabu above; each tabu
    run draws from its own stream named by the instance id.
    """
    if method not in ("auto", "exhaustive", "tabu"):
        raise ConfigurationError(f"unknown gse method {method!r}")
    annotated = []
    failures = []
    for problem in iset.problems:
        chosen = method
        if chosen == "auto":
            chosen = "exhaustive" if problem.n <= EXHAUSTIVE_MAX_N else "tabu"
        try:
            if chosen == "exhaustive":
                gse, _ = gse_exhaustive(problem)
            else:
                gse, _ = gse_tabu(
                    problem, tabu_params, substream(seed, "tabu", problem.id)
                )
        except CapacityError as exc:
            failures.append(f"{problem.id}: {exc}")
            continue
        annotated.append(replace(problem, gse_ref=gse, gse_provenance=chosen))
    if failures:
        raise CapacityError(
            "gse annotation failed for "
            f"{len(failures)} problems:\n  " + "\n  ".join(failures)
        )
    return InstanceSet(problems=annotated, seed=iset.seed, kind=iset.kind)


# --- JSON instance files ----------------------------------------------------

def problem_to_dict(problem: IsingProblem) -> dict:
    iu, ju = np.triu_indices(problem.n, 1)
    return {
        "id": problem.id,
        "n": problem.n,
        "couplings": [
            [int(i), int(j), float(problem.couplings[i, j])] for i, j in zip(iu, ju)
        ],
        "fields": [float(x) for x in problem.fields],
        "gse_ref": None if problem.gse_ref is None else float(problem.gse_ref),
        "gse_provenance": problem.gse_provenance,
    }


def problem_from_dict(data: dict) -> IsingProblem:
    try:
        n = int(data["n"])
        couplings = np.zeros((n, n))
        for i, j, value in data["couplings"]:
            couplings[int(i), int(j)] = float(value)
        gse = data["gse_ref"]
        return IsingProblem(
            n=n,
            couplings=couplings,
            fields=np.asarray(data["fields"], dtype=np.float64),
            id=str(data["id"]),
            gse_ref=None if gse is None else float(gse),
            gse_provenance=data["gse_provenance"],
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed instance record: {exc}") from exc


def save_instance_set(path, iset: InstanceSet) -> None:
    payload = {
        "seed": int(iset.seed),
        "kind": iset.kind,
        "problems": [problem_to_dict(p) for p in iset.problems],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_instance_set(path) -> InstanceSet:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        problems = [problem_from_dict(d) for d in data["problems"]]
        return InstanceSet(problems=problems, seed=int(data["seed"]), kind=str(data["kind"]))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed instance set file {path}: {exc}") from exc
