import sys

import numpy as np
import pytest

from funnelwatch.domain import ClaimAggregate, PopulationCell, StratumKey
from funnelwatch.ingest import Dataset

F_LOW = StratumKey("female", "40-44", "low")
M_LOW = StratumKey("male", "40-44", "low")


def make_dataset(cells, population, providers=None, metadata=None):
    """``cells`` maps (provider, diagnosis, specialty, stratum) -> count."""
    claims = [ClaimAggregate(p, d, sp, s, n) for (p, d, sp, s), n in cells.items()]
    pop = [PopulationCell(s, n) for s, n in population.items()]
    return Dataset(claims, pop, providers, metadata or {})


@pytest.fixture
def two_strata():
    return F_LOW, M_LOW


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, providers=8, diagnoses=3, strata=(F_LOW, M_LOW)):
    """Small dataset with one specialty and random positive counts."""
    cells = {}
    for d in range(diagnoses):
        for p in range(providers):
            for s in strata:
                n = int(rng.integers(1, 60))
                cells[(f"P{p:02d}", f"D{d}", "S1", s)] = n
    population = {s: int(rng.integers(20_000, 80_000)) for s in strata}
    return make_dataset(cells, population)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in mod.RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
