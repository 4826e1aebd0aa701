import os

import numpy as np
import pytest

from ssltrack.array import load_preset
from ssltrack.tdoa import build_tables


@pytest.fixture(scope="session")
def oma():
    return load_preset("oma")


@pytest.fixture(scope="session")
def cma():
    return load_preset("cma")


@pytest.fixture(scope="session")
def oma_tables(oma):
    return build_tables(oma)


@pytest.fixture(scope="session", autouse=True)
def _isolated_cache(tmp_path_factory):
    # one table cache per test session, never the user's
    old = os.environ.get("SSLTRACK_CACHE_DIR")
    os.environ["SSLTRACK_CACHE_DIR"] = str(tmp_path_factory.mktemp("cache"))
    yield
    if old is None:
        del os.environ["SSLTRACK_CACHE_DIR"]
    else:
        os.environ["SSLTRACK_CACHE_DIR"] = old


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
