"""Shared pytest fixtures for tests/one-offs/.

Adds scripts/ to sys.path so `import cnerf` resolves, keeps the debug
log out of the user's home, and gates the full-length training runs
behind --runslow.
"""

from pathlib import Path
import sys

import numpy as np
import pytest

# Make cnerf importable from any test file
_SCRIPTS = Path(__file__).resolve().parent.parent.parent / "scripts"
if str(_SCRIPTS) not in sys.path:
    sys.path.insert(0, str(_SCRIPTS))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the full-length paired training runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-length training run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolate_debug_log(tmp_path, monkeypatch):
    """Redirect the debug log into tmp_path and reset the warn-once throttle."""
    from cnerf import debug

    log_path = tmp_path / "cnerf-debug.log"
    monkeypatch.setenv("CNERF_DEBUG_LOG", str(log_path))
    debug.set_debug_log_path(None)
    debug.reset_warnings()
    yield log_path
    debug.reset_warnings()


@pytest.fixture
def two_cameras():
    """Two 64x48 cameras 0.8 apart on x, both looking down +z at the origin region."""
    from cnerf.geometry import Camera, intrinsics_from_fov

    K = intrinsics_from_fov(64, 48, 50.0)
    R = np.eye(3)
    cam_a = Camera(K, R, np.array([0.4, 0.0, 4.0]), 64, 48, "a")
    cam_b = Camera(K, R, np.array([-0.4, 0.0, 4.0]), 64, 48, "b")
    return cam_a, cam_b
