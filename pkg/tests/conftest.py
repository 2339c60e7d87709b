import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


def smooth_field(shape, amplitude, seed, sigma=2.0):
    """Smooth random vector field with max magnitude ``amplitude``."""
    rng = np.random.default_rng(seed)
    v = gaussian_filter(rng.standard_normal(tuple(shape) + (3,)), (sigma,) * 3 + (0,), mode="reflect")
    return v * (amplitude / np.sqrt((v ** 2).sum(-1)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
