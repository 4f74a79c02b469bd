import numpy as np
import pytest

from semi_ope import annotation as ann
from semi_ope.mdp import Policy, TrajectoryBatch

# acceptance results collected by test_acceptance.py, printed at session end
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def didactic():
    """Two-state example: behavior always takes action 0, state 0 pays +1,
    state 1 pays 0, one annotation (+1) for action 1 at state 0."""
    batch = TrajectoryBatch(np.array([[0], [1]]), np.array([[0], [0]]), np.array([[1.0], [0.0]]), np.array([1, 1]))
    values = np.zeros((2, 1, 2))
    avail = np.zeros((2, 1, 2), dtype=bool)
    values[0, 0, 1] = 1.0
    avail[0, 0, 1] = True
    ad = ann.AnnotatedDataset(batch, values, avail)
    pi_b = Policy(np.array([[1.0, 0.0], [1.0, 0.0]]), name="behavior")
    pi_e = Policy(np.array([[0.0, 1.0], [1.0, 0.0]]), name="evaluation")
    return {"batch": batch, "annotated": ad, "pi_b": pi_b, "pi_e": pi_e}
