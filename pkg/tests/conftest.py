from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from penaltydid.panel import NEVER, Panel, UnitMeta  # noqa: E402


def make_panel(y, group, age=None, months=None, observed=None, outcome="rx", covariates=None):
    """Tiny wide panel straight from arrays (no claims)."""
    y = np.asarray(y, dtype=np.float64)
    n, T = y.shape
    group = np.asarray([NEVER if g is None else g for g in group], dtype=np.int64)
    age = np.zeros(n) if age is None else np.asarray(age, dtype=np.float64)
    months = np.arange(T, dtype=np.int64) if months is None else np.asarray(months, dtype=np.int64)
    observed = np.ones((n, T), dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    units = tuple(UnitMeta(f"u{i}", 1990, None if group[i] == NEVER else int(group[i]), age_override=float(age[i]))
                  for i in range(n))
    outcomes = {outcome: y}
    for name in ("rx", "psy", "gp"):
        outcomes.setdefault(name, np.zeros((n, T)))
    return Panel(unit_ids=np.array([u.unit_id for u in units], dtype=object), months=months, outcomes=outcomes,
                 observed=observed, group=group, age=age, units=units, balanced=bool(observed.all()),
                 covariates=covariates or {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
