import os
from pathlib import Path

import numpy as np
import pytest

from thmrom.driver import Study

# a small box that keeps full-order runs to a couple of seconds
SMALL_CONFIG = {
    "geometry": {"nx": 3, "ny": 4, "nz": 5},
    "thermal": {"refine_x": 1, "n_steps": 20},
}

ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def cache_dir(request) -> Path:
    """Full-order run cache shared by the slow tests (THMROM_CACHE overrides)."""
    env = os.environ.get("THMROM_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return Path(request.config.cache.mkdir("thmrom"))


@pytest.fixture(scope="session")
def small_study() -> Study:
    return Study(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_traj(small_study):
    return small_study.fom()


@pytest.fixture(scope="session")
def ref_study(cache_dir) -> Study:
    return Study({}, cache_dir)


@pytest.fixture(scope="session")
def ref_traj(ref_study):
    return ref_study.fom()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
