"""Codebooks: weighted k-means training and nearest-centroid lookup."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from vptq import kernels
from vptq.errors import InsufficientData, InvalidK, ShapeError


class Role(str, enum.Enum):
    MAIN = "main"
    RESIDUAL = "residual"
    OUTLIER = "outlier"


ROLE_CODES = {Role.MAIN: 0, Role.RESIDUAL: 1, Role.OUTLIER: 2}


def is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    role: Role = Role.MAIN
    group_id: int = 0

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ShapeError(f"centroids must be a non-empty k x v matrix, got {c.shape}")
        if not is_power_of_two(c.shape[0]):
            raise InvalidK(f"k={c.shape[0]} is not a power of two")
        if not np.isfinite(c).all():
            raise ValueError("codebook contains non-finite centroids")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "group_id", int(self.group_id))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def vector_len(self) -> int:
        return self.centroids.shape[1]

    @property
    def bitwidth(self) -> int:
        return self.k.bit_length() - 1

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.role == other.role
            and self.group_id == other.group_id
            and self.centroids.shape == other.centroids.shape
            and self.centroids.tobytes() == other.centroids.tobytes()
        )

    __hash__ = None


@dataclass
class TrainOptions:
    max_iters: int = 100
    rel_tol: float = 1e-6
    seed: int = 0
    forced_seeds: Optional[Sequence[Sequence[float]]] = None
    empty_cluster_policy: str = "respawn_farthest"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.empty_cluster_policy != "respawn_farthest":
            raise ValueError(f"unknown empty_cluster_policy {self.empty_cluster_policy!r}")


def assign_nearest(vec, cb: Codebook) -> int:
    """Index of the centroid closest to ``vec`` in squared Euclidean distance.

    Ties go to the lowest index.
    """
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.shape[0] != cb.vector_len:
        raise ShapeError(f"vector length {vec.shape[0]} != codebook vector_len {cb.vector_len}")
    idx, _ = kernels.nearest(vec[None, :], cb.centroids)
    return int(idx[0])


def assign_all(vectors, cb: Codebook) -> np.ndarray:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[1] != cb.vector_len:
        raise ShapeError(f"expected (D, {cb.vector_len}) vectors, got {vectors.shape}")
    return kernels.nearest(vectors, cb.centroids)[0]


def weighted_objective(vectors, weights, cb, assignments) -> float:
    """Sum over vectors of ``weight * ||vector - assigned centroid||^2``."""
    x = np.asarray(vectors, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    a = np.asarray(assignments)
    c = np.asarray(cb.centroids if isinstance(cb, Codebook) else cb, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.shape[1] or w.shape != (x.shape[0],) or a.shape != (x.shape[0],):
        raise ShapeError("vectors, weights and assignments have inconsistent shapes")
    diff = x - c[a]
    return float(np.dot(w, np.einsum("ij,ij->i", diff, diff)))


def _validate(x, w, k):
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"vectors must be a non-empty D x v matrix, got {x.shape}")
    if w.shape != (x.shape[0],):
        raise ShapeError(f"weights shape {w.shape} != ({x.shape[0]},)")
    if not (w > 0).all():
        raise ValueError("weights must be positive")
    if not is_power_of_two(k):
        raise InvalidK(f"k={k} is not a power of two")
    if k > x.shape[0]:
        raise InsufficientData(f"k={k} exceeds the number of vectors D={x.shape[0]}")


def kmeans_pp_init(x, w, k, rng, forced=()) -> np.ndarray:
    """Weighted k-means++: a point is drawn with probability proportional to
    weight times squared distance to the closest centroid chosen so far.
    ``forced`` rows are taken first, in order."""
    d_count, v = x.shape
    centers = [np.asarray(f, dtype=np.float64).reshape(v) for f in forced]
    if len(centers) > k:
        raise InvalidK(f"{len(centers)} forced seeds exceed k={k}")
    if not centers:
        centers.append(x[rng.choice(d_count, p=w / w.sum())].copy())
    min_d = kernels.nearest(x, np.stack(centers))[1]
    while len(centers) < k:
        p = w * min_d
        total = p.sum()
        pick = rng.choice(d_count, p=p / total) if total > 0 else rng.choice(d_count, p=w / w.sum())
        centers.append(x[pick].copy())
        min_d = np.minimum(min_d, kernels.nearest(x, x[pick][None, :])[1])
    return np.stack(centers)


def weighted_means(x, w, assign, centroids, n_pinned=0, dists=None):
    """Lloyd update step: each centroid becomes the weighted mean of its cluster.

    Empty clusters are respawned at the point with the largest weighted
    distance to its current centroid. The first ``n_pinned`` centroids stay put.
    """
    k, v = centroids.shape
    wsum = np.bincount(assign, weights=w, minlength=k)
    new = centroids.copy()
    live = wsum > 0
    for j in range(v):
        s = np.bincount(assign, weights=w * x[:, j], minlength=k)
        new[live, j] = s[live] / wsum[live]
    new[:n_pinned] = centroids[:n_pinned]
    empty = np.flatnonzero(~live)
    empty = empty[empty >= n_pinned]
    if empty.size:
        if dists is None:
            diff = x - centroids[assign]
            dists = np.einsum("ij,ij->i", diff, diff)
        score = w * dists
        for c in empty:
            far = int(np.argmax(score))
            new[c] = x[far]
            score[far] = -1.0
    return new


def lloyd(x, w, centroids, max_iters=100, rel_tol=1e-6, n_pinned=0):
    """Weighted Lloyd iterations from ``centroids``.

    Returns ``(centroids, assignments, history)`` where ``history[i]`` is the
    weighted objective after the i-th assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c = np.array(centroids, dtype=np.float64)
    assign, d = kernels.nearest(x, c)
    obj = float(np.dot(w, d))
    history = [obj]
    for _ in range(max_iters):
        if obj == 0.0:
            break
        c = weighted_means(x, w, assign, c, n_pinned, d)
        assign, d = kernels.nearest(x, c)
        new = float(np.dot(w, d))
        history.append(new)
        done = obj - new <= rel_tol * obj
        obj = new
        if done:
            break
    return c, assign, history


def _train(x, w, k, opts, forced, n_pinned, role, group_id):
    rng = np.random.default_rng(opts.seed)
    wn = w / w.max()
    init = kmeans_pp_init(x, wn, k, rng, forced)
    c, _, _ = lloyd(x, wn, init, opts.max_iters, opts.rel_tol, n_pinned)
    cb = Codebook(c.astype(np.float32), role, group_id)
    return cb, kernels.nearest(x, cb.centroids)[0]


def train_codebook(vectors, weights, k: int, opts: Optional[TrainOptions] = None,
                   role: Role = Role.MAIN, group_id: int = 0):
    """Hessian-weighted k-means (weighted k-means++ seeding, then Lloyd).

    ``weights`` are per-vector importances, normally the Hessian diagonal
    entry of the column each vector was cut from. Returns the codebook and the
    nearest-centroid assignment of every vector against the stored float32
    centroids.
    """
    opts = opts or TrainOptions()
    x = np.asarray(vectors, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    _validate(x, w, k)
    forced = list(opts.forced_seeds or [])
    return _train(x, w, k, opts, forced, 0, role, group_id)


def train_residual_codebook(vectors, weights, k: int, opts: Optional[TrainOptions] = None,
                            group_id: int = 0):
    """Residual-stage codebook seeded with the zero vector.

    The zero seed bounds the weighted objective by the cost of skipping the
    stage. If Lloyd drifts the origin away so that some vector ends up farther
    from its nearest centroid than from zero, training is redone with the zero
    centroid pinned, which makes the per-vector bound hold as well.
    """
    opts = opts or TrainOptions()
    x = np.asarray(vectors, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    _validate(x, w, k)
    zero = np.zeros(x.shape[1])
    forced = [zero] + list(opts.forced_seeds or [])
    cb, assign = _train(x, w, k, opts, forced, 0, Role.RESIDUAL, group_id)
    best = kernels.nearest(x, cb.centroids)[1]
    skip = kernels.nearest(x, zero[None, :])[1]
    if (best > skip).any():
        cb, assign = _train(x, w, k, opts, forced, 1, Role.RESIDUAL, group_id)
    return cb, assign
