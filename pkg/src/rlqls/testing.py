"""Fault-injection sub-solvers for exercising the uphill acceptance branch.

The exact solver never proposes a candidate with dE > 0, so these stand-ins
exist to drive the Metropolis branch in tests. Not used by production paths.
"""

import numpy as np

from .subproblem import sub_energy


def pinned_assignment_solver(assignment):
    """Solver that always returns the given assignment (with its true
    sub-energy), regardless of the sub-problem content."""
    fixed = np.asarray(assignment, dtype=np.float64)

    def solver(sub):
        return fixed.copy(), sub_energy(sub, fixed)

    return solver


def random_assignment_solver(rng: np.random.Generator):
    """Solver that returns a uniformly random assignment."""

    def solver(sub):
        x = rng.integers(0, 2, size=sub.m).astype(np.float64) * 2.0 - 1.0
        return x, sub_energy(sub, x)

    return solver
