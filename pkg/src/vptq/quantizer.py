"""Column-by-column second-order vector quantization.

Each column of ``W`` (M x N, columns indexed like the Hessian) is cut into
length-``v`` vectors, each vector is replaced by its nearest centroid, and
the column's error is pushed into the still-unquantized columns through the
inverse Hessian so that the proxy loss ``tr(dW H dW^T)`` stays minimal.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from vptq import kernels
from vptq.codebook import (
    Codebook,
    Role,
    TrainOptions,
    is_power_of_two,
    train_codebook,
    train_residual_codebook,
)
from vptq.errors import ConfigError, CorruptIndices, InvalidHessian, ShapeError
from vptq.hessian import DEFAULT_DAMPING, HessianData, load_hessian
from vptq.tensor_store import TensorF32, load_npy


class ColumnOrder(str, enum.Enum):
    NATURAL = "natural"
    DESCENDING_HESSIAN_DIAG = "descending_hessian_diag"


class Propagation(str, enum.Enum):
    # row q of the inverse of H restricted to the not-yet-quantized columns
    INVERSE_ROW = "inverse_row"
    # row q of the full inverse, computed once
    STATIC_INVERSE_ROW = "static_inverse_row"
    # row q of H itself divided by H^-1_qq (compatibility/experiment only)
    HESSIAN_ROW = "hessian_row"
    NONE = "none"


@dataclass
class QuantConfig:
    v1: int = 8
    k1: int = 256
    k2: int = 0
    v0: int = 0
    k0: int = 0
    outlier_percent: float = 0.0
    group_num: int = 1
    damping_fraction: float = DEFAULT_DAMPING
    column_order: ColumnOrder = ColumnOrder.NATURAL
    propagation: Propagation = Propagation.INVERSE_ROW
    kmeans: TrainOptions = field(default_factory=TrainOptions)

    def __post_init__(self):
        if self.k2 == -1:
            self.k2 = 0
        if isinstance(self.kmeans, dict):
            self.kmeans = TrainOptions(**self.kmeans)

    def problems(self) -> list[str]:
        out = []

        def pow2(name, value, minimum):
            if not isinstance(value, int) or value < minimum or not is_power_of_two(value):
                out.append(f"{name}={value!r} must be a power of two >= {minimum}")

        if not isinstance(self.v1, int) or self.v1 < 1:
            out.append(f"v1={self.v1!r} must be an integer >= 1")
        pow2("k1", self.k1, 2)
        if self.k2 != 0:
            pow2("k2", self.k2, 1)
        if not isinstance(self.outlier_percent, (int, float)) or not 0 <= self.outlier_percent <= 100:
            out.append(f"outlier_percent={self.outlier_percent!r} must lie in [0, 100]")
        elif self.outlier_percent > 0:
            if not isinstance(self.v0, int) or self.v0 < 1:
                out.append(f"v0={self.v0!r} must be an integer >= 1 when outliers are enabled")
            pow2("k0", self.k0, 1)
        if not isinstance(self.group_num, int) or self.group_num < 1:
            out.append(f"group_num={self.group_num!r} must be an integer >= 1")
        if not isinstance(self.damping_fraction, (int, float)) or not self.damping_fraction > 0:
            out.append(f"damping_fraction={self.damping_fraction!r} must be positive")
        try:
            ColumnOrder(self.column_order)
        except ValueError:
            out.append(f"column_order={self.column_order!r} is not one of {[c.value for c in ColumnOrder]}")
        try:
            Propagation(self.propagation)
        except ValueError:
            out.append(f"propagation={self.propagation!r} is not one of {[p.value for p in Propagation]}")
        return out

    def validate(self) -> "QuantConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        self.column_order = ColumnOrder(self.column_order)
        self.propagation = Propagation(self.propagation)
        return self

    @property
    def outliers_enabled(self) -> bool:
        return self.outlier_percent > 0

    @classmethod
    def from_dict(cls, data: dict) -> "QuantConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        problems = [f"unknown config key {key!r}" for key in data if key not in names]
        kwargs = {key: value for key, value in data.items() if key in names}
        try:
            kmeans = kwargs.get("kmeans")
            if isinstance(kmeans, dict):
                kwargs["kmeans"] = TrainOptions(**kmeans)
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(problems + [str(exc)]) from exc
        problems += cfg.problems()
        if problems:
            raise ConfigError(problems)
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "QuantConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["column_order"] = ColumnOrder(self.column_order).value
        d["propagation"] = Propagation(self.propagation).value
        if d["kmeans"]["forced_seeds"] is not None:
            d["kmeans"]["forced_seeds"] = [list(map(float, s)) for s in d["kmeans"]["forced_seeds"]]
        return d


@dataclass(frozen=True)
class QuantStats:
    proxy_loss: float
    sum_delta_L: float
    frobenius_mse: float
    max_abs_err: float


@dataclass(frozen=True)
class GroupBand:
    """Contiguous column range ``[col_start, col_end)`` sharing one main codebook.

    Outlier columns inside the range are not part of the band.
    """

    group_id: int
    col_start: int
    col_end: int


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    rows: int
    cols: int
    config: QuantConfig
    outlier_cols: tuple
    bands: tuple
    codebooks: tuple
    main_indices: np.ndarray
    residual_indices: Optional[np.ndarray]
    outlier_indices: np.ndarray
    stats: QuantStats

    @property
    def main_columns(self) -> np.ndarray:
        mask = np.ones(self.cols, dtype=bool)
        mask[list(self.outlier_cols)] = False
        return np.flatnonzero(mask)

    @property
    def padded_rows(self) -> dict:
        out = {"main": _num_vectors(self.rows, self.config.v1) * self.config.v1}
        if self.outlier_cols:
            out["outlier"] = _num_vectors(self.rows, self.config.v0) * self.config.v0
        return out

    def band_columns(self, band: GroupBand) -> np.ndarray:
        cols = self.main_columns
        return cols[(cols >= band.col_start) & (cols < band.col_end)]

    def codebook(self, role: Role, group_id: int = 0) -> Codebook:
        for cb in self.codebooks:
            if cb.role == role and cb.group_id == group_id:
                return cb
        raise KeyError(f"no {Role(role).value} codebook for group {group_id}")

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (
            (self.rows, self.cols) == (other.rows, other.cols)
            and self.config.to_dict() == other.config.to_dict()
            and tuple(self.outlier_cols) == tuple(other.outlier_cols)
            and tuple(self.bands) == tuple(other.bands)
            and tuple(self.codebooks) == tuple(other.codebooks)
            and same(self.main_indices, other.main_indices)
            and same(self.residual_indices, other.residual_indices)
            and same(self.outlier_indices, other.outlier_indices)
            and self.stats == other.stats
        )

    __hash__ = None


def _num_vectors(m: int, v: int) -> int:
    return -(-m // v)


def _matrix(w) -> np.ndarray:
    if isinstance(w, TensorF32):
        w = w.data
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {w.shape}")
    return w


def reshape_column(column, v: int) -> np.ndarray:
    """Cut a length-M column into ceil(M/v) row slices of length v.

    The last slice is zero-padded when v does not divide M.
    """
    column = np.asarray(column).ravel()
    m = column.shape[0]
    n = _num_vectors(m, v)
    out = np.zeros(n * v, dtype=column.dtype)
    out[:m] = column
    return out.reshape(n, v)


def unreshape_column(vectors, m: int) -> np.ndarray:
    return np.asarray(vectors).reshape(-1)[:m]


def _column_vectors(w: np.ndarray, cols, v: int) -> np.ndarray:
    m = w.shape[0]
    n = _num_vectors(m, v)
    block = np.zeros((n * v, len(cols)), dtype=np.float64)
    block[:m] = w[:, cols]
    # (cols, n, v): vectors of one column stay contiguous
    return block.T.reshape(len(cols) * n, v)


def delta_L(q_hat, q_orig, hinv_qq: float) -> float:
    """Proxy-loss increase from fixing one column at ``q_hat``."""
    if not hinv_qq > 0:
        raise InvalidHessian(f"H^-1_qq must be positive, got {hinv_qq}")
    e = np.asarray(q_hat, dtype=np.float64) - np.asarray(q_orig, dtype=np.float64)
    if e.ndim != 1:
        raise ShapeError("q_hat and q_orig must be equal-length vectors")
    return float(e @ e) / (2.0 * hinv_qq)


def quantize_column(work: np.ndarray, q: int, cb: Codebook, residual_cb: Optional[Codebook] = None):
    """Map each vector of column ``q`` to its nearest centroid.

    No Hessian enters the search: within one column the loss increase is the
    plain squared error scaled by a constant. With ``residual_cb`` the leftover
    of each vector is matched against it too and both centroids are summed.
    Returns ``(q_hat, main_idx, residual_idx)``; ``q_hat`` has padding stripped.
    """
    m = work.shape[0]
    vecs = reshape_column(np.asarray(work[:, q], dtype=np.float64), cb.vector_len)
    idx = kernels.nearest(vecs, cb.centroids)[0]
    recon = cb.centroids[idx].astype(np.float64)
    res_idx = None
    if residual_cb is not None:
        if residual_cb.vector_len != cb.vector_len:
            raise ShapeError("residual codebook vector length differs from the main codebook")
        res_idx = kernels.nearest(vecs - recon, residual_cb.centroids)[0]
        recon = (cb.centroids[idx] + residual_cb.centroids[res_idx]).astype(np.float64)
    return recon.reshape(-1)[:m], idx, res_idx


def _hinv(hd) -> np.ndarray:
    return hd.Hinv if isinstance(hd, HessianData) else np.asarray(hd)


def propagate_error(work: np.ndarray, q: int, q_hat, hd, unquantized) -> None:
    """Fix column ``q`` at ``q_hat`` and compensate the unquantized columns.

    ``work[:, j] += e * Hinv[q, j] / Hinv[q, q]`` with ``e = q_hat - work[:, q]``.
    ``hd`` is a HessianData or the inverse matrix to use; columns not listed in
    ``unquantized`` are left alone.
    """
    hinv = _hinv(hd)
    cols = np.asarray(sorted(unquantized), dtype=np.int64)
    if q in set(cols.tolist()):
        raise ValueError(f"column {q} is still marked unquantized")
    q_hat = np.asarray(q_hat, dtype=work.dtype)
    if q_hat.shape != (work.shape[0],):
        raise ShapeError(f"q_hat has shape {q_hat.shape}, expected ({work.shape[0]},)")
    e = q_hat - work[:, q]
    work[:, q] = q_hat
    if cols.size:
        work[:, cols] += np.outer(e, hinv[q, cols] / hinv[q, q])


def downdate_inverse(hinv: np.ndarray, q: int) -> None:
    """Remove column q from the inverse in place.

    After the call ``hinv`` restricted to the remaining indices is the inverse
    of H restricted to those indices; row and column q are zero.
    """
    d = hinv[q, q]
    row = hinv[q].copy()
    hinv -= np.outer(row, row) / d
    hinv[q, :] = 0.0
    hinv[:, q] = 0.0


def select_outlier_columns(w, hd: HessianData, percent: float) -> list[int]:
    """Columns with the largest ``H_qq * ||W[:, q]||^2``; floor(percent * N / 100) of them."""
    w = _matrix(w).astype(np.float64)
    n = w.shape[1]
    if not 0 <= percent <= 100:
        raise ValueError("percent must lie in [0, 100]")
    count = math.floor(Fraction(str(percent)) * n / 100)
    if count == 0:
        return []
    score = np.diag(hd.H) * np.einsum("ij,ij->j", w, w)
    order = sorted(range(n), key=lambda q: (-score[q], q))
    return sorted(order[:count])


def split_bands(columns, group_num: int) -> list[np.ndarray]:
    """Split into ``group_num`` contiguous chunks; the last takes the remainder."""
    columns = np.asarray(columns)
    if len(columns) < group_num:
        raise ConfigError(f"group_num={group_num} exceeds the {len(columns)} non-outlier columns")
    size = len(columns) // group_num
    chunks = [columns[g * size:(g + 1) * size] for g in range(group_num - 1)]
    chunks.append(columns[(group_num - 1) * size:])
    return chunks


def proxy_loss(w, w_hat, hd: HessianData) -> float:
    """``tr(dW H dW^T)`` with ``dW = w_hat - w``, accumulated in float64."""
    w = _matrix(w).astype(np.float64)
    w_hat = _matrix(w_hat).astype(np.float64)
    if w.shape != w_hat.shape or w.shape[1] != hd.dim:
        raise ShapeError(f"shapes {w.shape}, {w_hat.shape} incompatible with Hessian dim {hd.dim}")
    dw = w_hat - w
    return float(np.einsum("ij,ij->", dw @ hd.H, dw))


def proxy_loss_decomposed(w, w_hat, hd: HessianData) -> tuple[float, float]:
    """Split the proxy loss into the diagonal part ``sum_i h_ii ||dW_i||^2``
    and the cross part ``sum_{i != j} h_ij <dW_i, dW_j>``."""
    w = _matrix(w).astype(np.float64)
    w_hat = _matrix(w_hat).astype(np.float64)
    if w.shape != w_hat.shape or w.shape[1] != hd.dim:
        raise ShapeError(f"shapes {w.shape}, {w_hat.shape} incompatible with Hessian dim {hd.dim}")
    dw = w_hat - w
    gram = dw.T @ dw
    h = hd.H
    diag = float(np.dot(np.diag(h), np.diag(gram)))
    cross = float((h * gram).sum() - np.trace(h * gram))
    return diag, cross


def _column_order(cfg: QuantConfig, hd: HessianData, outliers, n: int) -> list[int]:
    if cfg.column_order == ColumnOrder.DESCENDING_HESSIAN_DIAG:
        diag = np.diag(hd.H)
        order = sorted(range(n), key=lambda q: (-diag[q], q))
    else:
        order = list(range(n))
    out_set = set(outliers)
    return [q for q in order if q in out_set] + [q for q in order if q not in out_set]


def quantize_matrix(w, hd: HessianData, cfg: QuantConfig) -> QuantizedMatrix:
    """Quantize one weight matrix.

    Outlier columns get their own codebook; the rest are split into
    ``group_num`` column bands with one Hessian-weighted codebook each. All
    codebooks are trained on the original weights. Columns are then quantized
    one at a time (outliers first), each column's error propagated into every
    column not yet quantized. The optional residual stage quantizes
    ``W - W_main`` (original weights minus the main-stage reconstruction) with
    one zero-seeded codebook per band and does not propagate.
    """
    cfg.validate()
    w32 = _matrix(w).astype(np.float32)
    m, n = w32.shape
    if hd.dim != n:
        raise ShapeError(f"Hessian dim {hd.dim} != weight columns {n}")
    w64 = w32.astype(np.float64)
    hdiag = np.diag(hd.H)
    opts = cfg.kmeans

    outliers = select_outlier_columns(w32, hd, cfg.outlier_percent) if cfg.outliers_enabled else []
    mask = np.ones(n, dtype=bool)
    mask[outliers] = False
    main_cols = np.flatnonzero(mask)
    chunks = split_bands(main_cols, cfg.group_num)

    owner = {}
    codebooks = []
    if outliers:
        nv0 = _num_vectors(m, cfg.v0)
        cb0, _ = train_codebook(_column_vectors(w64, outliers, cfg.v0), np.repeat(hdiag[outliers], nv0),
                                cfg.k0, opts, Role.OUTLIER, 0)
        codebooks.append(cb0)
        owner.update({q: cb0 for q in outliers})
    nv1 = _num_vectors(m, cfg.v1)
    bands = []
    for g, chunk in enumerate(chunks):
        cb, _ = train_codebook(_column_vectors(w64, chunk, cfg.v1), np.repeat(hdiag[chunk], nv1),
                               cfg.k1, opts, Role.MAIN, g)
        codebooks.append(cb)
        owner.update({int(q): cb for q in chunk})
        bands.append(GroupBand(g, int(chunk[0]), int(chunk[-1]) + 1))

    prop = Propagation(cfg.propagation)
    hinv = hd.Hinv.copy()
    work = w64.copy()
    unquantized = set(range(n))
    indices = {}
    residuals = {}
    sum_dl = 0.0
    for q in _column_order(cfg, hd, outliers, n):
        cb = owner[q]
        q_hat, idx, _ = quantize_column(work, q, cb)
        indices[q] = idx
        if cfg.k2 and cb.role == Role.MAIN:
            # residual against the original weights; pad coordinates stay zero
            residuals[q] = reshape_column(w64[:, q] - q_hat, cb.vector_len)
        e = q_hat - work[:, q]
        sum_dl += delta_L(q_hat, work[:, q], hinv[q, q])
        unquantized.discard(q)
        if prop in (Propagation.INVERSE_ROW, Propagation.STATIC_INVERSE_ROW):
            propagate_error(work, q, q_hat, hinv, unquantized)
            if prop == Propagation.INVERSE_ROW:
                downdate_inverse(hinv, q)
        elif prop == Propagation.HESSIAN_ROW:
            cols = np.asarray(sorted(unquantized), dtype=np.int64)
            work[:, q] = q_hat
            if cols.size:
                work[:, cols] += np.outer(e, hd.H[q, cols] / hd.Hinv[q, q])
        else:
            work[:, q] = q_hat

    main_idx = np.stack([indices[int(q)] for q in main_cols]).astype(np.int64)
    out_idx = (np.stack([indices[q] for q in outliers]).astype(np.int64) if outliers
               else np.zeros((0, 0), dtype=np.int64))
    res_idx = None
    if cfg.k2:
        res_rows = []
        for g, chunk in enumerate(chunks):
            vecs = np.concatenate([residuals[int(q)] for q in chunk])
            rcb, ridx = train_residual_codebook(vecs, np.repeat(hdiag[chunk], nv1), cfg.k2, opts, g)
            codebooks.append(rcb)
            res_rows.append(ridx.reshape(len(chunk), nv1))
        res_idx = np.concatenate(res_rows).astype(np.int64)

    qm = QuantizedMatrix(m, n, cfg, tuple(int(q) for q in outliers), tuple(bands), tuple(codebooks),
                         main_idx, res_idx, out_idx, QuantStats(0.0, 0.0, 0.0, 0.0))
    w_hat = dequantize(qm).data.astype(np.float64)
    dw = w_hat - w64
    stats = QuantStats(
        proxy_loss=float(np.einsum("ij,ij->", dw @ hd.H, dw)),
        sum_delta_L=float(sum_dl),
        frobenius_mse=float(np.mean(dw * dw)),
        max_abs_err=float(np.abs(dw).max()),
    )
    return dataclasses.replace(qm, stats=stats)


def _gather(cb: Codebook, idx: np.ndarray, m: int) -> np.ndarray:
    if idx.size and (idx.min() < 0 or idx.max() >= cb.k):
        raise CorruptIndices(f"{cb.role.value} indices out of range for k={cb.k}")
    return cb.centroids[idx].reshape(idx.shape[0], -1)[:, :m]


def dequantize(qm: QuantizedMatrix) -> TensorF32:
    """Rebuild the M x N matrix by centroid lookups (plus residual centroids)."""
    m = qm.rows
    out = np.zeros((m, qm.cols), dtype=np.float32)
    cols = qm.main_columns
    expected = _num_vectors(m, qm.config.v1)
    if qm.main_indices.shape != (len(cols), expected):
        raise CorruptIndices(f"main indices shape {qm.main_indices.shape} != {(len(cols), expected)}")
    if qm.residual_indices is not None and qm.residual_indices.shape != qm.main_indices.shape:
        raise CorruptIndices("residual indices do not match main indices")
    pos = 0
    for band in qm.bands:
        bcols = qm.band_columns(band)
        sl = slice(pos, pos + len(bcols))
        block = _gather(qm.codebook(Role.MAIN, band.group_id), qm.main_indices[sl], m)
        if qm.residual_indices is not None:
            block = block + _gather(qm.codebook(Role.RESIDUAL, band.group_id), qm.residual_indices[sl], m)
        out[:, bcols] = block.T
        pos += len(bcols)
    if pos != len(cols):
        raise CorruptIndices("group bands do not cover every non-outlier column")
    if qm.outlier_cols:
        ocols = list(qm.outlier_cols)
        if qm.outlier_indices.shape != (len(ocols), _num_vectors(m, qm.config.v0)):
            raise CorruptIndices("outlier indices shape mismatch")
        out[:, ocols] = _gather(qm.codebook(Role.OUTLIER, 0), qm.outlier_indices, m).T
    return TensorF32((m, qm.cols), out)


@dataclass
class LayerResult:
    name: str
    quantized: Optional[QuantizedMatrix] = None
    error: Optional[BaseException] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def load_manifest(path) -> list[tuple[str, str, str]]:
    """Read a JSON array of ``{name, weight, hessian}``; relative paths resolve
    against the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ConfigError("manifest must be a JSON array")
    out = []
    for i, e in enumerate(entries):
        missing = [k for k in ("name", "weight", "hessian") if k not in e]
        if missing:
            raise ConfigError(f"manifest entry {i} lacks {missing}")
        out.append((e["name"], os.path.join(base, e["weight"]), os.path.join(base, e["hessian"])))
    return out


def _quantize_entry(entry, cfg):
    name, w_path, h_path = entry
    try:
        w = load_npy(w_path)
        hd = load_hessian(h_path)
        return LayerResult(name, quantize_matrix(w, hd, cfg))
    except Exception as exc:  # reported per entry
        return LayerResult(name, error=exc)


def quantize_model(manifest, cfg: QuantConfig, workers: Optional[int] = None) -> list[LayerResult]:
    """Quantize every manifest entry independently; results keep manifest order.

    A failing entry is reported in its LayerResult and does not stop the others.
    """
    workers = workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda e: _quantize_entry(e, cfg), manifest))
