import numpy as np
import pytest

from vptq.codebook import train_codebook
from vptq.hessian import HessianData


def random_spd(rng, n, ridge=0.01, rank=None):
    a = rng.standard_normal((n, rank or n))
    return a @ a.T / (rank or n) + ridge * np.eye(n)


def correlated_instance(seed, m=32, n=32):
    rng = np.random.default_rng(seed)
    hd = HessianData.from_matrix(random_spd(rng, n))
    w = rng.standard_normal((m, n)).astype(np.float32)
    return w, hd


def plain_vq(w, cfg):
    """Reference: one Hessian-free codebook, every vector snapped to its nearest centroid."""
    m, n = w.shape
    nv = -(-m // cfg.v1)
    padded = np.zeros((nv * cfg.v1, n))
    padded[:m] = w
    vecs = padded.T.reshape(n * nv, cfg.v1)
    cb, a = train_codebook(vecs, np.ones(len(vecs)), cfg.k1, cfg.kmeans)
    return cb.centroids[a].reshape(n, nv * cfg.v1)[:, :m].T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
