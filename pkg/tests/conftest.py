import numpy as np
import pytest

from mvrefer import scenes

# acceptance criterion number -> one-line verdict, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
    passed = sum(line.startswith("[PASS]") for line in ACCEPTANCE.values())
    terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE)} criteria pass")


def random_rotation(gen: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def standard_samples():
    spec = scenes.preset("standard")
    return [scenes.dataset_sample(spec, i, 11) for i in range(6)]


@pytest.fixture(scope="session")
def sample(standard_samples):
    return standard_samples[0]


@pytest.fixture(scope="session")
def small_sample():
    """32x32 rendering so patch-16 toy models have P = 4."""
    spec = scenes.preset("standard").replace(image_size=(32, 32), num_views=4, total_frames=12)
    return scenes.dataset_sample(spec, 0, 5)
