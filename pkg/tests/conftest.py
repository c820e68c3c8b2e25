import numpy as np
import pytest

from tavernboost import explain, synth
from tavernboost.gbdt import predict_margin

EFFICIENCY_TOL = 1e-9

# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []
# largest efficiency gap seen by the guard, and how many matrices it checked
EFFICIENCY_SEEN = {"max_gap": 0.0, "matrices": 0}


@pytest.fixture(autouse=True)
def efficiency_guard(monkeypatch):
    """Check the efficiency identity on every attribution the library produces."""
    real_matrix = explain.shap_matrix
    real_vector = explain.tree_shap

    def checked_matrix(ensemble, matrix):
        out = real_matrix(ensemble, matrix)
        if out.n_rows:
            margins = np.atleast_1d(predict_margin(ensemble, getattr(matrix, "bins", matrix)))
            gap = np.abs(out.base_value + out.phi.sum(axis=1) - margins).max()
            EFFICIENCY_SEEN["max_gap"] = max(EFFICIENCY_SEEN["max_gap"], float(gap))
            EFFICIENCY_SEEN["matrices"] += 1
            assert gap < EFFICIENCY_TOL, f"efficiency gap {gap}"
        return out

    def checked_vector(ensemble, row):
        out = real_vector(ensemble, row)
        gap = abs(out.base_value + out.phi.sum() - predict_margin(ensemble, np.asarray(row)))
        assert gap < EFFICIENCY_TOL, f"efficiency gap {gap}"
        return out

    monkeypatch.setattr(explain, "shap_matrix", checked_matrix)
    monkeypatch.setattr(explain, "tree_shap", checked_vector)
    yield


@pytest.fixture(scope="session")
def cohort():
    return synth.generate(synth.load_synth_spec())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
