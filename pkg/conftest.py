import hypothesis
import numpy as np
import pytest

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=100, deadline=None)
hypothesis.settings.load_profile("fast")


def pytest_addoption(parser):
    parser.addoption("--tier", choices=("fast", "full"), default="fast",
                     help="fast: scaled-down budgets; full: full training/mesh budgets")
    parser.addoption("--runslow", action="store_true", default=False, help="run benchmark tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: benchmark runs that take minutes")
    config.addinivalue_line("markers", "full: needs --tier full")


def pytest_collection_modifyitems(config, items):
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    skip_full = pytest.mark.skip(reason="needs --tier full")
    for item in items:
        if "slow" in item.keywords and not config.getoption("--runslow"):
            item.add_marker(skip_slow)
        if "full" in item.keywords and config.getoption("--tier") != "full":
            item.add_marker(skip_full)


@pytest.fixture
def tier(request):
    return request.config.getoption("--tier")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
