"""Proxy Hessian construction from calibration activations.

The layer-wise proxy is ``H = (2/n) X X^T`` over ``n`` calibration columns,
damped by a fraction of its mean diagonal. H is indexed by input features
(weight-matrix columns).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from vptq.errors import InvalidHessian, NotPositiveDefinite, ShapeError
from vptq.tensor_store import TensorF32, atomic_open, load_npy, save_npy

DEFAULT_DAMPING = 0.01


@dataclass
class HessianAccumulator:
    dim: int
    sum: np.ndarray = None
    sample_count: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError("Hessian dimension must be >= 1")
        if self.sum is None:
            self.sum = np.zeros((self.dim, self.dim), dtype=np.float64)

    def update(self, batch) -> "HessianAccumulator":
        x = batch.data if isinstance(batch, TensorF32) else np.asarray(batch)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != self.dim:
            raise ShapeError(f"batch must have {self.dim} rows, got shape {x.shape}")
        x = x.astype(np.float64)
        outer = x @ x.T
        self.sum += outer + outer.T
        self.sample_count += x.shape[1]
        return self


def accumulate(acc: HessianAccumulator, batch) -> HessianAccumulator:
    """Add ``2 X X^T`` for a batch ``X`` of shape (dim, s)."""
    return acc.update(batch)


def _cholesky_inverse(h: np.ndarray) -> np.ndarray:
    chol, info = lapack.dpotrf(h, lower=True, clean=True)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise InvalidHessian(f"dpotrf argument error {info}")
    inv, info = lapack.dpotri(chol, lower=True)
    if info != 0:
        raise NotPositiveDefinite(max(info - 1, 0), "inverse failed: singular Cholesky factor")
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv


@dataclass(frozen=True, eq=False)
class HessianData:
    """Damped SPD Hessian with its inverse, all float64."""

    H: np.ndarray
    Hinv: np.ndarray
    hinv_diag: np.ndarray
    damping_fraction: float = 0.0
    sample_count: int = 0

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.H)

    @classmethod
    def from_matrix(cls, h, damping_fraction: float = 0.0, sample_count: int = 0) -> "HessianData":
        """Wrap an already-damped SPD matrix, computing its inverse by Cholesky."""
        h = np.array(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ShapeError(f"Hessian must be square, got {h.shape}")
        if not np.array_equal(h, h.T):
            h = 0.5 * (h + h.T)
        hinv = _cholesky_inverse(h)
        diag = np.diag(hinv).copy()
        if not (diag > 0).all():
            raise InvalidHessian("inverse Hessian has a nonpositive diagonal entry")
        resid = np.abs(h @ hinv - np.eye(h.shape[0])).max()
        if resid > 1e-6 * np.abs(h).max():
            raise InvalidHessian(f"inverse residual {resid:.3e} too large; Hessian is ill-conditioned")
        for a in (h, hinv, diag):
            a.flags.writeable = False
        return cls(h, hinv, diag, float(damping_fraction), int(sample_count))


def finalize(acc: HessianAccumulator, damping_fraction: float = DEFAULT_DAMPING) -> HessianData:
    if acc.sample_count < 1:
        raise ShapeError("no calibration samples accumulated")
    if not damping_fraction > 0:
        raise ValueError("damping_fraction must be positive")
    h = acc.sum / acc.sample_count
    h[np.diag_indices_from(h)] += damping_fraction * np.mean(np.diag(h))
    return HessianData.from_matrix(h, damping_fraction, acc.sample_count)


def identity_hessian(dim: int) -> HessianData:
    if dim < 1:
        raise ShapeError("dim must be >= 1")
    eye = np.eye(dim)
    return HessianData.from_matrix(eye)


def sidecar_path(path) -> str:
    return os.fspath(path) + ".meta"


def save_hessian(hd: HessianData, path) -> None:
    """Write H as an N x N NPY plus a ``key=value`` sidecar."""
    save_npy(TensorF32.from_array(hd.H), path)
    with atomic_open(sidecar_path(path), "w") as fh:
        fh.write(f"dim={hd.dim}\n")
        fh.write(f"sample_count={hd.sample_count}\n")
        fh.write(f"damping_fraction={hd.damping_fraction!r}\n")


def load_hessian(path) -> HessianData:
    """Load a saved (already damped) Hessian; the sidecar is optional."""
    t = load_npy(path)
    if len(t.shape) != 2:
        raise ShapeError(f"{path}: Hessian must be 2-D")
    meta = {}
    side = sidecar_path(path)
    if os.path.exists(side):
        with open(side) as fh:
            for line in fh:
                line = line.strip()
                if line and "=" in line:
                    key, value = line.split("=", 1)
                    meta[key.strip()] = value.strip()
    return HessianData.from_matrix(
        t.data,
        damping_fraction=float(meta.get("damping_fraction", 0.0)),
        sample_count=int(meta.get("sample_count", 0)),
    )
