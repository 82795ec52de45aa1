import numpy as np
import pytest

from stagecal.calibration import SRLSet
from stagecal.imaging import ChartSamples


def _random_sl(rng, cond_limit=100.0):
    # diagonally dominated positive matrix; resample until well-conditioned
    while True:
        sl = rng.uniform(0.05, 0.5, (3, 3)) + np.diag(rng.uniform(0.5, 1.5, 3))
        s = np.linalg.svd(sl, compute_uv=False)
        if s[0] / s[-1] < cond_limit:
            return sl


@pytest.fixture
def random_sl():
    return _random_sl


@pytest.fixture
def random_q_fixture():
    """Factory for random full-rank least-squares fixtures."""

    def make(rng, beta=0.3):
        sl = _random_sl(rng)
        m = np.linalg.inv(sl)
        srl = SRLSet(rng.uniform(0.0, 0.8, (24, 3, 3)))
        w_avg = rng.uniform(0.2, 1.0, 3)
        targets = ChartSamples(rng.uniform(0.01, 1.0, (24, 3)))
        return sl, m, srl, w_avg, targets, beta

    return make
