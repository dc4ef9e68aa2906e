import os
import platform
import shutil

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "cnn2c", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "cnn2c"))

IS_X86 = platform.machine().lower() in {"x86_64", "amd64", "i386", "i686"}


def find_cc():
    for name in (os.environ.get("CNN2C_CC"), os.environ.get("CC"), "cc", "gcc", "clang"):
        if name and shutil.which(name):
            return name
    return None


def find_fast_cc():
    """Compiler used for the very large fully unrolled builds.

    clang parses multi-megabyte straight-line files several times faster
    than gcc at -O0, which is what keeps the whole-model checks inside
    their time budget.
    """
    if os.environ.get("CNN2C_CC"):
        return os.environ["CNN2C_CC"]
    for name in ("clang", "cc", "gcc"):
        if shutil.which(name):
            return name
    return None


CC = find_cc()
FAST_CC = find_fast_cc()


def pytest_collection_modifyitems(config, items):
    no_cc = pytest.mark.skip(reason="no C compiler found (set CNN2C_CC)")
    not_x86 = pytest.mark.skip(reason="SSE intrinsics need an x86 host")
    for item in items:
        if CC is None and "needs_cc" in item.keywords:
            item.add_marker(no_cc)
        if not IS_X86 and "x86" in item.keywords:
            item.add_marker(not_x86)


@pytest.fixture(scope="session")
def cc():
    return CC


@pytest.fixture
def workdir(tmp_path):
    return tmp_path


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
