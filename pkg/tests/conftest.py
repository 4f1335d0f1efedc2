from functools import lru_cache
from importlib import resources

import pytest

from cohlens import read_prescription


def fixture_path(name: str):
    return resources.files("cohlens") / "data" / f"{name}.lens"


@lru_cache(maxsize=None)
def load(name: str):
    return read_prescription(fixture_path(name))


@pytest.fixture
def singlet():
    return load("singlet")


@pytest.fixture
def asphere():
    return load("high_asphere")


@pytest.fixture
def ideal():
    return load("ideal")


from hypothesis import settings  # noqa: E402

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
