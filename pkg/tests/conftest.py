import numpy as np
import pytest
from hypothesis import settings

from fusionprobe.geometry import Calibration
from fusionprobe.synthetic import build_dataset, kitti_calibration

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def calib():
    return kitti_calibration()


@pytest.fixture
def simple_calib():
    """Pinhole f=700, principal point (600, 180), LiDAR axes rotated into camera axes."""
    p2 = np.array([[700.0, 0, 600, 0], [0, 700.0, 180, 0], [0, 0, 1, 0]])
    v2c = np.array([[0.0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0], [0, 0, 0, 1]])
    return Calibration(p2, v2c, (1242, 375))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_dataset(root, n_seeds=6, n_objects=4, seed=3)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from verdicts import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
