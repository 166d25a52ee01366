import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, ``CRITERION n PASS|FAIL: detail``, and return the flag."""

    def record(number, parts):
        ok = all(passed for _, passed in parts)
        detail = "; ".join(f"{text} [{'ok' if passed else 'miss'}]" for text, passed in parts)
        line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
