import numpy as np
import pytest

from indimart.decompose import CORPUS_SEEDS, corpus_instance, decompose_martingale
from indimart.space import Filtration, Partition, WeightedSpace

_CORPUS: dict = {}


def corpus_decomposition(seed: int):
    """Decomposition of corpus instance ``seed``, computed once per session."""
    if seed not in _CORPUS:
        space, F, Xs = corpus_instance(seed)
        _CORPUS[seed] = (space, F, Xs, decompose_martingale(Xs, F, space))
    return _CORPUS[seed]


def worked_example():
    """Four equally likely points, K = 2, ``F_1 = {{1,2},{3,4}}``."""
    space = WeightedSpace(("w1", "w2", "w3", "w4"), np.full(4, 0.25))
    F = Filtration((Partition.trivial(4), Partition([0, 0, 1, 1]), Partition.finest(4)))
    X1 = np.array([1.0, 1.0, -1.0, -1.0])
    X2 = X1 + np.array([-1.0, 1.0, -2.0, 2.0])
    return space, F, [X1, X2]


@pytest.fixture(scope="session")
def corpus():
    return [corpus_decomposition(s) for s in CORPUS_SEEDS]


@pytest.fixture
def example():
    return worked_example()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(module.RESULTS, key=lambda c: int(c[1:])):
        terminalreporter.write_line(module.RESULTS[cid])
