import pickle

import pytest

from mpqdm import pipeline
from mpqdm.config import RunConfig


@pytest.fixture(scope="session")
def teacher_bytes():
    fp, losses = pipeline.train_teacher(RunConfig())
    return pickle.dumps((fp, losses))


@pytest.fixture
def teacher(teacher_bytes):
    """Fresh copy of the default FP teacher (trained once per session)."""
    return pickle.loads(teacher_bytes)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
