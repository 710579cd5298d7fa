import numpy as np
import pytest

from rlqls.seeding import substream

# collected (criterion, passed, detail) lines, printed at the end of the run
ACCEPTANCE_RESULTS = []


def record_acceptance(criterion: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS.append((criterion, passed, detail))
    status = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {criterion}: {status}" + (f" — {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"{criterion}: {status}" + (f" — {detail}" if detail else "")
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return substream(20240, "tests")


def seeded_problem(n: int, seed: int = 42, annotate: bool = False):
    """One reproducible fully-connected instance for tests."""
    from rlqls.ising import generate_instance, gse_exhaustive

    problem = generate_instance(n, substream(seed, "test-problem", n))
    if annotate:
        from dataclasses import replace

        gse, _ = gse_exhaustive(problem)
        problem = replace(problem, gse_ref=gse, gse_provenance="exhaustive")
    return problem


def seeded_config(n: int, seed: int = 7) -> np.ndarray:
    from rlqls.ising import random_config

    return random_config(n, substream(seed, "test-config", n))
