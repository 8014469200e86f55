import pytest
from hypothesis import HealthCheck, settings

from aflsim.core import rng_stream
from aflsim.objectives import NoiseSpec, make_quadratic_suite

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def quad20():
    return make_quadratic_suite(20, 10, 1.0, 10.0, rng_stream(0, "suite"))


def quad(n=5, d=4, h=1.0, sigma2=0.0, seed=0):
    return make_quadratic_suite(n, d, h, 10.0, rng_stream(seed, "suite"), NoiseSpec(sigma2))


# one line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


class _Criterion:
    def __init__(self, number, name):
        self.number, self.name = number, name
        self.checks = []

    def check(self, label, ok, detail=""):
        self.checks.append((label, bool(ok), detail))
        return bool(ok)

    def verify(self):
        failed = [f"{label} ({detail})" for label, ok, detail in self.checks if not ok]
        assert self.checks, "criterion recorded no checks"
        assert not failed, "; ".join(failed)

    @property
    def ok(self):
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def line(self):
        parts = [f"{label}: {detail}" if detail else label for label, ok, detail in self.checks if not ok] or [
            f"{label}: {detail}" if detail else label for label, _, detail in self.checks
        ]
        return f"[{'PASS' if self.ok else 'FAIL'}] criterion {self.number:>2} {self.name} | " + "; ".join(parts)


@pytest.fixture
def criterion(request):
    """Checks for one acceptance criterion; the test ends with ``criterion.verify()``."""
    marker = request.node.get_closest_marker("criterion")
    c = _Criterion(*marker.args)
    _ACCEPTANCE[c.number] = c
    return c


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k].line())
    passed = sum(c.ok for c in _ACCEPTANCE.values())
    terminalreporter.write_line(f"{passed}/{len(_ACCEPTANCE)} criteria passed")
