import numpy as np
import pytest

from sidctr import evaluation


@pytest.fixture(scope="session")
def tiny_bench():
    """Small end-to-end benchmark shared by model/evaluation/cli tests."""
    return evaluation.prepare_benchmark(
        n_items=120, n_users=40, n_queries=20, n_events=4000, d=16,
        rq_K=4, opq_K=8, seed=0, opq_iters=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
