import contextlib
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ctan", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctan")

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as out:`` records PASS/FAIL plus ``out.detail`` for the summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    @contextlib.contextmanager
    def record(number, title):
        out, t0 = _Outcome(), time.perf_counter()
        try:
            yield out
        except BaseException as exc:
            store[number] = (title, False, out.detail or f"{type(exc).__name__}: {exc}".splitlines()[0],
                             time.perf_counter() - t0)
            raise
        store[number] = (title, True, out.detail, time.perf_counter() - t0)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        title, passed, detail, seconds = store[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  [{seconds:.1f}s]"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
