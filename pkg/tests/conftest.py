import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from testsel.datamodel import CICycle, CommitRecord, FileChange, TestVerdict  # noqa: E402
from testsel.logging_utils import set_log_handler  # noqa: E402
from testsel.settings import LOG_LEVEL_ENV  # noqa: E402


DAY = 86400
T0 = 1_600_041_600


def make_commit(commit_id, ts, paths, author="a1", change_type="modified", added=3, deleted=1):
    changes = []
    for path in paths:
        kind = change_type
        lines_added = 0 if kind == "deleted" else added
        changes.append(FileChange(path, kind, lines_added, deleted))
    return CommitRecord(commit_id, ts, author, tuple(changes))


def make_cycle(cycle_id, ts, commit_ids=(), results=None, durations=None):
    """``results`` maps test id to "passed"/"failed" or (verdict, "flaky"/"broken")."""
    verdicts = []
    for test_id, outcome in (results or {}).items():
        flag = None
        if isinstance(outcome, tuple):
            outcome, flag = outcome
        verdicts.append(
            TestVerdict(
                cycle_id,
                test_id,
                ts,
                outcome,
                (durations or {}).get(test_id),
                flag == "flaky",
                flag == "broken",
            )
        )
    return CICycle(cycle_id, ts, tuple(commit_ids), tuple(verdicts))


@pytest.fixture(autouse=True)
def log_lines(monkeypatch):
    monkeypatch.delenv(LOG_LEVEL_ENV, raising=False)
    lines = []
    set_log_handler(lines.append)
    yield lines
    set_log_handler(None)


@pytest.fixture
def small_synth_config():
    return {
        "n_files": 40,
        "n_tests": 20,
        "n_days": 40,
        "commits_per_day": 3,
        "n_modules": 2,
        "n_packages": 2,
        "n_fault_rules": 4,
        "noise_rate": 0.0,
    }
