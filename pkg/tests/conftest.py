import pytest

from common import G
from rpratlas.regions import AtlasConfig, build_atlas

_cache = {}


def atlas_at(depth: int):
    if depth not in _cache:
        _cache[depth] = build_atlas(G, AtlasConfig(depth=depth))
    return _cache[depth]


@pytest.fixture(scope="session")
def atlas6():
    return atlas_at(6)


@pytest.fixture(scope="session")
def atlas7():
    return atlas_at(7)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
