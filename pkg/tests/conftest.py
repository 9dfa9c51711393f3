import os

# at least four workers even on small machines, so thread-count checks are not vacuous
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(4, os.cpu_count() or 1)))

import pytest

from aftergate.harness import default_system


@pytest.fixture(scope="session")
def system():
    return default_system()


@pytest.fixture(scope="session")
def bob(system):
    return system.bob


@pytest.fixture(scope="session")
def d0(bob):
    return bob.d0


@pytest.fixture(scope="session")
def d1(bob):
    return bob.d1


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion."""

    def _record(number, passed, detail, seconds):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail} ({seconds:.1f} s)"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return _record
