import numpy as np
import pytest

from moddragon.data import generate_synthetic
from moddragon.model import TrainConfig

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        prev = _acceptance.get(number)
        if prev is None or prev[1] == "PASS":
            _acceptance[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, status = _acceptance[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return TrainConfig(rep_width=5, rep_depth=2, head_width=4, head_depth=2, k=3,
                       epochs=5, batch_size=16, patience=3, learning_rate=1e-3)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(n=200, d=4, confounding_strength=0.5, ate_target=1.0,
                              noise_sd=0.5, seed=11)
