import numpy as np
import pytest

from fedbayes.datasets import Dataset, synth_generate
from fedbayes.nn import ModelParams


def make_params(arch, arrays):
    return ModelParams.from_arrays(arch, [np.asarray(a, dtype=float) for a in arrays])


def flat_dataset(features, labels, class_count):
    features = np.asarray(features, dtype=float)
    return Dataset(features, labels, 1, features.shape[1], class_count)


@pytest.fixture
def small_synth():
    return synth_generate(seed=3, per_class=20, class_count=4, dim=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
