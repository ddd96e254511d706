import time

import numpy as np
import pytest

from cwa_lab.harness import DatasetSpec, default_zoo_spec, generate_dataset, train_zoo
from cwa_lab.models import MLP, Ensemble, LinearSoftmax, QuadraticModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    data = generate_dataset(DatasetSpec(per_class=80, seed=7))
    return data.split(0.25, 7)


@pytest.fixture(scope="session")
def small_zoo(small_split):
    train, _ = small_split
    return train_zoo(train, default_zoo_spec(seed=7, epochs=30))


@pytest.fixture
def diag_pair():
    """Two 2-D diagonal quadratics used by the hand-computed traces."""
    q1 = QuadraticModel([0.6, 0.5], np.diag([1.0, 2.0]))
    q2 = QuadraticModel([0.55, 0.45], np.diag([2.0, 1.0]))
    return Ensemble([q1, q2], "loss")


@pytest.fixture
def mlp_ensemble():
    r = np.random.default_rng(5)
    members = [MLP.init(6, 3, 8, r, act, scale=3.0) for act in ("tanh", "softplus", "sigmoid")]
    members.append(LinearSoftmax.init(6, 3, r, scale=1.0))
    return Ensemble(members, "logits")


CAMPAIGN_SEEDS = range(20)


class ZooBank(list):
    """(seed, test split, zoo) triples plus the time spent building them."""
    build_seconds = 0.0


@pytest.fixture(scope="session")
def seeded_zoos():
    """Default 8-member zoo and held-out test split for each campaign seed."""
    t0 = time.perf_counter()
    out = ZooBank()
    for seed in CAMPAIGN_SEEDS:
        train, test = generate_dataset(DatasetSpec(seed=seed)).split(0.25, seed)
        out.append((seed, test, train_zoo(train, default_zoo_spec(seed))))
    out.build_seconds = time.perf_counter() - t0
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
