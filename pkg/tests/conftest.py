import numpy as np
import pytest

from policylab.core import Dataset, Schema
from policylab.synthgen import PAPER_PROPENSITIES, ScenarioConfig, generate

# acceptance outcomes, one line per criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def make_dataset(features, treatment, outcome, cards, K, table=None):
    table = table if table is not None else [1.0 / K] * K
    schema = Schema(tuple(cards), K)
    return Dataset.from_arrays(schema, np.asarray(features).reshape(len(treatment), len(cards)), treatment, outcome, table)


def random_dataset(seed, n=200, cards=(2, 3), K=3, table=None, integer_y=True):
    rng = np.random.default_rng(seed)
    table = table if table is not None else rng.dirichlet(np.ones(K) * 3)
    table = np.asarray(table) / np.sum(table)
    X = np.stack([rng.integers(0, c, n) for c in cards], axis=1)
    t = rng.choice(K, size=n, p=table)
    # guarantee every arm appears
    t[:K] = np.arange(K)
    y = rng.poisson(3.0, n).astype(float) if integer_y else rng.exponential(2.0, n)
    return make_dataset(X, t, y, cards, K, tuple(table))


@pytest.fixture(scope="session")
def paper_like():
    cfg = ScenarioConfig(n_rows=60_000, seed=11, effect_scale=0.3, propensity_table=PAPER_PROPENSITIES)
    return generate(cfg)
