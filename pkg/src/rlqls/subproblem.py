"""Clamped sub-problems: extraction, exact solution, and merge-back.

Selecting m variables and freezing the rest turns the full Hamiltonian into
an m-spin problem with the same internal couplings, effective fields that
absorb the frozen neighbours, and a constant offset (the frozen remainder's
energy). For any assignment x of the selected spins,

    full_energy(merge(config, indices, x)) == sub_energy(x) + offset

up to floating-point roundoff, so optimizing the sub-problem exactly can
never increase the full energy.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ContractViolation
from .ising import IsingProblem, _check_config

SOLVE_MAX_M = 20
_ENUM_CHUNK = 1 << 16

# (2^m, m) spin tables for the small m used in inner loops, built on demand.
_spin_table_cache: dict = {}


def _spin_table(m: int) -> np.ndarray:
    """All assignments of m spins, row k encoding k (bit 0 = spin 0, bit=0 -> -1)."""
    table = _spin_table_cache.get(m)
    if table is None:
        codes = np.arange(1 << m, dtype=np.uint32)
        table = ((codes[:, None] >> np.arange(m, dtype=np.uint32)) & 1) * 2.0 - 1.0
        table.setflags(write=False)
        _spin_table_cache[m] = table
    return table


@dataclass(frozen=True)
class SubProblem:
    """Restriction of a problem to `indices` with everything else frozen."""

    indices: tuple
    sub_couplings: np.ndarray  # (m, m) strictly upper-triangular
    eff_fields: np.ndarray  # (m,)
    offset: float

    @property
    def m(self) -> int:
        return len(self.indices)


def extract(problem: IsingProblem, config: np.ndarray, indices) -> SubProblem:
    """Build the clamped sub-problem for the selected indices under `config`."""
    config = _check_config(problem, config)
    idx = np.asarray(list(indices), dtype=np.intp)
    m = idx.size
    if m < 1:
        raise ContractViolation("need at least one selected index")
    if np.unique(idx).size != m:
        raise ContractViolation("selected indices must be distinct")
    if idx.min() < 0 or idx.max() >= problem.n:
        raise ContractViolation(f"selected index out of range for n={problem.n}")

    sym = problem.sym
    frozen = np.ones(problem.n, dtype=bool)
    frozen[idx] = False

    inner = sym[np.ix_(idx, idx)]
    sub_couplings = np.triu(inner, k=1)
    eff_fields = problem.fields[idx] + sym[idx][:, frozen] @ config[frozen]

    frozen_idx = np.flatnonzero(frozen)
    frozen_config = config[frozen_idx]
    frozen_j = problem.couplings[np.ix_(frozen_idx, frozen_idx)]
    offset = float(
        frozen_config @ (frozen_j @ frozen_config)
        + problem.fields[frozen_idx] @ frozen_config
    )
    return SubProblem(
        indices=tuple(int(i) for i in idx),
        sub_couplings=sub_couplings,
        eff_fields=eff_fields,
        offset=offset,
    )


def sub_energy(sub: SubProblem, assignment: np.ndarray) -> float:
    """Energy of an assignment under the clamped sub-Hamiltonian (no offset)."""
    x = np.asarray(assignment, dtype=np.float64)
    if x.shape != (sub.m,):
        raise ContractViolation(f"assignment has shape {x.shape}, expected ({sub.m},)")
    return float(x @ (sub.sub_couplings @ x) + sub.eff_fields @ x)


def solve_exact(sub: SubProblem) -> tuple[np.ndarray, float]:
    """Global minimum of the sub-problem by enumerating all 2^m assignments.

    Ties are broken toward the smallest binary encoding (spin -1 at index a
    clears bit a, index 0 is the least significant bit).
    """
    m = sub.m
    if m > SOLVE_MAX_M:
        raise CapacityError(f"m={m} exceeds the exact-solve cap of {SOLVE_MAX_M}")
    total = 1 << m
    best_e = np.inf
    best_code = 0
    if total <= _ENUM_CHUNK:
        table = _spin_table(m)
        energies = (table * (table @ sub.sub_couplings.T)).sum(axis=1) + table @ sub.eff_fields
        best_code = int(np.argmin(energies))
        best_e = energies[best_code]
    else:
        for start in range(0, total, _ENUM_CHUNK):
            codes = np.arange(start, min(start + _ENUM_CHUNK, total), dtype=np.uint32)
            chunk = ((codes[:, None] >> np.arange(m, dtype=np.uint32)) & 1) * 2.0 - 1.0
            energies = (chunk * (chunk @ sub.sub_couplings.T)).sum(axis=1) + chunk @ sub.eff_fields
            k = int(np.argmin(energies))
            if energies[k] < best_e:
                best_e = energies[k]
                best_code = int(codes[k])
    assignment = ((best_code >> np.arange(m, dtype=np.uint32)) & 1) * 2.0 - 1.0
    return assignment, float(best_e)


def apply_assignment(config: np.ndarray, indices, assignment: np.ndarray) -> np.ndarray:
    """Merge a sub-problem assignment back into a copy of the configuration."""
    config = np.asarray(config, dtype=np.float64)
    idx = np.asarray(list(indices), dtype=np.intp)
    x = np.asarray(assignment, dtype=np.float64)
    if idx.shape != x.shape:
        raise ContractViolation(
            f"indices and assignment lengths differ: {idx.size} vs {x.size}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= config.size):
        raise ContractViolation("merge index out of range")
    merged = config.copy()
    merged[idx] = x
    return merged
