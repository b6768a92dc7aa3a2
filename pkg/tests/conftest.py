import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from rtpower.core_types import TrialTable
from rtpower.io import bundled_scenario

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def zero_random(s):
    for f, t in (("participant", "intercept"), ("participant", "relatedness"),
                 ("item", "intercept"), ("item", "relatedness")):
        s = s.with_sd(f, t, 0.0)
    return s


def random_toy_table(rng, n_p, n_i, reps=1, drop=0.0):
    """Small crossed table with optional missing rows, for oracle comparisons."""
    rows = []
    for p in range(n_p):
        for i in range(n_i):
            for cond in ("related", "unrelated"):
                for r in range(reps):
                    if rng.random() < drop:
                        continue
                    rows.append((f"p{p}", f"i{i}", cond, r, float(rng.normal(900, 150))))
    df = pd.DataFrame(rows, columns=["participant_id", "item_id", "condition", "replicate", "rt_ms"])
    return TrialTable(df, require_positive_rt=False)


@pytest.fixture(scope="session")
def lab_phon():
    return bundled_scenario("lab_phonological")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
