import numpy as np
import pytest

from adacal import dataset


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def random_dataset(rng, n=None, d=None, k=None, logit_scale=3.0):
    """A random CalibrationDataset with no structure beyond valid shapes."""
    n = n if n is not None else int(rng.integers(1, 65))
    d = d if d is not None else int(rng.integers(1, 6))
    k = k if k is not None else int(rng.integers(2, 11))
    return dataset.CalibrationDataset(
        features=rng.standard_normal((n, d)),
        logits=logit_scale * rng.standard_normal((n, k)),
        labels=rng.integers(0, k, size=n).astype(np.uint32),
    )


def random_temps(rng, n):
    """Scalar or per-sample temperatures in [0.1, 5], half the time each."""
    if rng.random() < 0.5:
        return float(rng.uniform(0.1, 5.0))
    return rng.uniform(0.1, 5.0, size=n)


@pytest.fixture
def rng():
    return make_rng(20260817)
