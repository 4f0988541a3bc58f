import numpy as np
import pytest

from erpcond import protocol as P
from erpcond import synth


@pytest.fixture(scope="session")
def small_cohort():
    return synth.generate_cohort(3, 2, 11, 0.4)


@pytest.fixture(scope="session")
def small_es(small_cohort):
    return P.prepare_dataset(small_cohort.recordings)


@pytest.fixture(scope="session")
def small_plans(small_es):
    return P.make_fold_plans(small_es, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the capture mode."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
