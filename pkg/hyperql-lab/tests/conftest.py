# tests/conftest.py
import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-seed directional reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed reproductions, minutes per test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_output_root(tmp_path, monkeypatch):
    """Keep governance files and default run directories out of the working tree."""
    monkeypatch.setenv("HYPERQL_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"
