import numpy as np
import pytest

from fairalloc.core import ProblemDims, RequestProfile


@pytest.fixture
def canonical():
    """Two agents, two resources, unit demands and budgets.

    Hand-solvable: agent 1 values (1, 0.5), agent 2 values (1, 0.25).
    The fair split gives a = [[0.25, 1], [0.75, 0]] and utilities
    (0.75, 0.75).
    """
    return RequestProfile(
        values=np.array([[1.0, 0.5], [1.0, 0.25]]),
        demands=np.ones((2, 2)),
        budgets=np.array([1.0, 1.0]),
        weights=np.ones(2),
    )


@pytest.fixture
def dims22():
    return ProblemDims(2, 2)


def random_profile(rng: np.random.Generator, n=2, m=2) -> RequestProfile:
    """Generic strictly-positive random instance (no sparsity)."""
    return RequestProfile(
        values=rng.uniform(0.1, 1.0, (n, m)),
        demands=rng.uniform(0.1, 1.0, (n, m)),
        budgets=rng.uniform(0.5, 1.5, m),
        weights=np.ones(n),
    )
