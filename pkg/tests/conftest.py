"""Shared study configurations and a per-session cache of study runs."""

from __future__ import annotations

import sys
from dataclasses import replace

import pytest

from ocuprobe import evalharness as eh

# four 2 h evaluation shifts per subject at a 10 min cadence: 12 checkups per shift
SMALL = dict(n_subjects=6, n_shifts=6, shift_hours=2.0, checkup_period=600, tot_checkup_period=300,
             p_alcohol=1.0, p_driving=0.5, n_trees=30)


def small_config(**over) -> eh.StudyConfig:
    return eh.StudyConfig.from_dict({**SMALL, **over})


_STUDIES: dict = {}


def study_table(seed: int, **over) -> eh.ResultsTable:
    """Results table of the study at ``seed`` (memoized for the session)."""
    key = (seed, tuple(sorted(over.items())))
    if key not in _STUDIES:
        cfg = replace(eh.StudyConfig(), seed=seed, **over)
        _STUDIES[key] = eh.run_study(cfg).table
    return _STUDIES[key]


@pytest.fixture(scope="session")
def small_study():
    return eh.run_study(small_config())


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "ACCEPTANCE", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
