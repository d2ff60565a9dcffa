import copy

import pytest
import torch

from itportrait.backends.toy import make_toy_backends, make_toy_case
from itportrait.latent import SeededRng

torch.set_num_threads(1)

_ACCEPTANCE = {}
_SETUP = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    # setup time counts too: some criteria do their heavy work in a fixture
    if report.when == "setup":
        _SETUP[number] = report.duration
    if report.when == "call" or (report.when == "setup" and not report.passed):
        duration = report.duration + (_SETUP.get(number, 0.0) if report.when == "call" else 0.0)
        _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, duration = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  ({duration:6.1f}s)  {title}")


@pytest.fixture(scope="session")
def toy():
    # shared and read-only, like pretrained weights; training tests work on copies
    b = make_toy_backends()
    for p in b.g3d.parameters():
        p.requires_grad_(False)
    return b


@pytest.fixture
def fresh_toy():
    """A private backend set for tests that must not share module state."""
    return make_toy_backends()


@pytest.fixture(scope="session")
def toy_case(toy):
    return make_toy_case(toy, SeededRng(100))


@pytest.fixture
def g3d_copy(toy):
    return copy.deepcopy(toy.g3d)
