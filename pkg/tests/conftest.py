import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results is None:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in range(1, 8):
        checks = results.get(crit)
        if checks is None:
            tr.write_line(f"criterion {crit}: FAIL  (no result recorded: not run, or errored before reporting)")
            continue
        ran = [c for c in checks if c[1] is not None]
        if not ran:
            tr.write_line(f"criterion {crit}: SKIP  ({checks[0][2]})")
            continue
        status = "PASS" if all(c[1] for c in ran) else "FAIL"
        tr.write_line(f"criterion {crit}: {status}")
        for name, passed, detail in checks:
            mark = "ok " if passed else ("-- " if passed is None else "XX ")
            tr.write_line(f"    {mark}{name}" + (f"  [{detail}]" if detail else ""))
