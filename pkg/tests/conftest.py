import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import settings

from cta_recon.phantom import generate, recipe
from cta_recon.pipeline import run_pipeline

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True,
                          print_blob=True)
settings.load_profile("repo")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


@dataclass
class PhantomRun:
    volume: object
    truth: object
    result: object
    seconds: float


@pytest.fixture(scope="session")
def phantom():
    """``phantom(name) -> (volume, truth)``, generated once per session."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = generate(recipe(name))
        return cache[name]

    return get


@pytest.fixture(scope="session")
def phantom_run(phantom):
    """``phantom_run(name) -> PhantomRun`` with the full pipeline applied."""
    cache = {}

    def get(name):
        if name not in cache:
            volume, truth = phantom(name)
            t0 = time.perf_counter()
            result = run_pipeline(volume, truth.seeds)
            cache[name] = PhantomRun(volume, truth, result, time.perf_counter() - t0)
        return cache[name]

    return get


@pytest.fixture
def acceptance():
    def record(number, title, passed, detail):
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append((number, f"[{status}] AC{number:02d} {title}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)


def sphere_phi(n=31, r=10.0, spacing=(1.0, 1.0, 1.0), centre=None):
    """``r - |x - c|`` on an ``n``-cube, in world mm."""
    sp = np.asarray(spacing)
    c = np.full(3, (n - 1) / 2.0) * sp if centre is None else np.asarray(centre)
    idx = np.indices((n, n, n)).reshape(3, -1).T * sp
    d = np.linalg.norm(idx - c, axis=1).reshape(n, n, n)
    return r - d
