import numpy as np
import pytest

import labelembed as le


@pytest.fixture
def table1_dataset():
    """The four worked NLI vote rows used across the suite."""
    labels = le.ClassLabels(["contradiction", "neutral", "entailment"])
    rows = [(0, 0, 100), (42, 14, 44), (46, 53, 1), (34, 31, 35)]
    instances = [
        le.Instance(f"t1_{i + 1}", le.VoteCounts(v)) for i, v in enumerate(rows)
    ]
    return le.AnnotationDataset(labels, instances)


@pytest.fixture
def fast_mcmc():
    """Small chain settings for pipeline tests that do not assert moments."""
    return le.McmcConfig(n_retained=200, burn_in=60, thin=2, seed=11)


def make_dataset(count_rows, names=None):
    rows = [tuple(r) for r in count_rows]
    K = len(rows[0])
    labels = le.ClassLabels(names or [f"c{k + 1}" for k in range(K)])
    instances = [
        le.Instance(f"i{idx}", le.VoteCounts(r)) for idx, r in enumerate(rows)
    ]
    return le.AnnotationDataset(labels, instances)


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)
