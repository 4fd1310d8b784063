import numpy as np
import pytest
from hypothesis import settings

from upo.datagen import PreferenceTriple, TripleBatch
from upo.models import (
    estimator_descriptor,
    new_estimator,
    new_policy,
    new_reward,
    policy_descriptor,
    reward_descriptor,
)

settings.register_profile("repo", derandomize=True, print_blob=True)
settings.load_profile("repo")

TINY = dict(vocab=8, context=8, embed=4, hidden=6)


@pytest.fixture
def tiny_policy():
    return new_policy(policy_descriptor(**TINY), seed=1)


@pytest.fixture
def tiny_reward():
    return new_reward(reward_descriptor(**TINY), seed=2)


@pytest.fixture
def tiny_estimator():
    return new_estimator(estimator_descriptor(**TINY), seed=3)


def random_batch(rng, n, vocab=8, context=8):
    triples = []
    for j in range(n):
        x = tuple(int(t) for t in rng.integers(1, vocab, size=int(rng.integers(1, 3))))
        room = context - len(x)
        a = tuple(int(t) for t in rng.integers(0, vocab, size=int(rng.integers(1, room))))
        b = a
        while b == a:
            b = tuple(int(t) for t in rng.integers(0, vocab, size=int(rng.integers(1, room))))
        triples.append(PreferenceTriple(f"t{j}", x, a, b))
    return TripleBatch(triples)


@pytest.fixture
def tiny_batch():
    return random_batch(np.random.default_rng(7), 4)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
