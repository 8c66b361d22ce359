import numpy as np
import pytest

from consign.dataset_io import SynthConfig, synthesize, write_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_dataset(tmp_path):
    """One calibration item, W=H=2, L=2, N_s=3."""
    rng = np.random.default_rng(0)
    scores = rng.dirichlet([1.0, 1.0], size=(3, 4)).reshape(3, 8)
    truth = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    path = write_dataset(tmp_path / "ds", "tiny", [scores], [truth], ["calibration"], num_labels=2)
    return path


@pytest.fixture(scope="session")
def desk_items():
    """Acceptance-scale synthetic items (12x12, L=3, N_s=32, 3 modes, noise 0.5)."""
    return synthesize(SynthConfig(seed=1, n_items=60))
