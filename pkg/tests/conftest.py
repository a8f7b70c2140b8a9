from pathlib import Path

import numpy as np
import pytest

from dsdlab.token_model import TokenModel

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


class ScriptedUniforms:
    """Uniform stream that replays fixed values, for hand-traced tests."""

    def __init__(self, values):
        self.values = list(values)
        self.used = 0

    def random(self):
        v = self.values[self.used]
        self.used += 1
        return v


def random_model(rng, vocab_size, kind=None, sparse=False):
    kind = kind or ("iid" if rng.random() < 0.5 else "markov")

    def vec():
        p = rng.dirichlet(np.ones(vocab_size))
        if sparse and vocab_size > 2:
            # knock out one entry to exercise zero-probability tokens
            p[rng.integers(vocab_size)] = 0.0
            p = p / p.sum()
        return p

    if kind == "iid":
        return TokenModel.iid(vec())
    return TokenModel.markov(np.array([vec() for _ in range(vocab_size)]), vec())


@pytest.fixture
def scripted():
    return ScriptedUniforms


@pytest.fixture
def configs_dir():
    return CONFIGS


# --- acceptance reporting ------------------------------------------------------

_criteria_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _criteria_markers.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    prev = _criteria_results.get(number, (title, "PASS"))[1]
    status = "PASS" if report.passed and prev == "PASS" else "FAIL"
    _criteria_results[number] = (title, status)


_criteria_markers = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria_markers[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria_results):
        title, status = _criteria_results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
