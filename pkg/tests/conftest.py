import numpy as np
import pytest


def random_spd(rng, d, cond=None):
    """Random SPD matrix; with ``cond`` its eigenvalues span [1, cond]."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if cond is None:
        eig = rng.uniform(0.5, 3.0, d)
    else:
        eig = np.geomspace(1.0, cond, d)
    return (Q * eig) @ Q.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
