import numpy as np
import pytest

from daa.ingest import Labels
from daa.synth import SyntheticSpec, generate_cohort, make_ground_truth
from daa.transform import LogAbundanceMatrix


@pytest.fixture(scope="session")
def truth():
    return make_ground_truth()


@pytest.fixture(scope="session")
def cohort(truth):
    """Reference-size planted cohort (275 cases, 189 controls)."""
    return generate_cohort(truth, SyntheticSpec.preset("table-s2-main", seed=0))


def make_matrix(values, prefix="s"):
    values = np.asarray(values, dtype=float)
    taxa = tuple(f"t{i}" for i in range(values.shape[0]))
    samples = tuple(f"{prefix}{j}" for j in range(values.shape[1]))
    return LogAbundanceMatrix(taxa, samples, values)


def make_labels(samples, n_case):
    mask = np.zeros(len(samples), dtype=bool)
    mask[:n_case] = True
    return Labels.from_mask(samples, mask)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
