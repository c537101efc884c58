"""Index bit-packing, the ``.vptq`` container, and compression accounting.

Bitstream layout: index i occupies stream bits ``[i*bw, (i+1)*bw)`` with its
least significant bit first; stream bit b is bit ``b % 8`` of byte ``b // 8``.
Trailing pad bits are zero.

Container layout (all little-endian)::

    b"VPTQ1"  u32 section_count
    section:  u16 tag  u64 length  u32 crc32(payload)  payload
    META  (1): UTF-8 JSON with shapes, config, bands, outlier columns, stats
    CBOOK (2): u8 role  u32 group  u16 v  u32 k  f32[k*v] centroids
    IDX   (3): u8 role  u32 group  u8 bitwidth  u64 count  packed bytes

Unknown tags are skipped.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from vptq import kernels
from vptq.codebook import ROLE_CODES, Codebook, Role
from vptq.errors import CorruptContainer, CorruptStream, FormatError, IndexOverflow, IoError
from vptq.quantizer import GroupBand, QuantConfig, QuantizedMatrix, QuantStats, _num_vectors
from vptq.tensor_store import atomic_open

MAGIC = b"VPTQ1"
TAG_META, TAG_CBOOK, TAG_IDX = 1, 2, 3
ORIGINAL_BITS = 16
_ROLE_BY_CODE = {code: role for role, code in ROLE_CODES.items()}
_SECTION = struct.Struct("<HQI")


@dataclass(frozen=True)
class PackedIndices:
    bitwidth: int
    count: int
    data: bytes


def pack(indices, bitwidth: int) -> PackedIndices:
    if not 1 <= bitwidth <= 16:
        raise ValueError(f"bitwidth must lie in 1..16, got {bitwidth}")
    arr = np.asarray(indices, dtype=np.int64).ravel()
    bad = np.flatnonzero((arr < 0) | (arr >> bitwidth != 0))
    if bad.size:
        pos = int(bad[0])
        raise IndexOverflow(pos, int(arr[pos]), bitwidth)
    return PackedIndices(bitwidth, int(arr.size), kernels.pack_bits(arr, bitwidth))


def unpack(p: PackedIndices) -> np.ndarray:
    if not 1 <= p.bitwidth <= 16:
        raise CorruptStream(f"bitwidth {p.bitwidth} outside 1..16")
    if len(p.data) != -(-p.count * p.bitwidth // 8):
        raise CorruptStream(f"{len(p.data)} bytes cannot hold exactly {p.count} x {p.bitwidth}-bit indices")
    values, clean = kernels.unpack_bits(p.data, p.bitwidth, p.count)
    if not clean:
        raise CorruptStream("nonzero trailing pad bits")
    return values


# -- accounting -------------------------------------------------------------


@dataclass(frozen=True)
class CompressionReport:
    """Exact bit counts; derived ratios are Fractions until displayed."""

    params: int
    codebook_bits: int
    index_bits: int

    @property
    def total_original_bits(self) -> int:
        return ORIGINAL_BITS * self.params

    @property
    def compressed_bits(self) -> int:
        return self.codebook_bits + self.index_bits

    @property
    def compression_ratio(self) -> Fraction:
        return Fraction(self.total_original_bits, self.compressed_bits)

    @property
    def equivalent_bitwidth(self) -> Fraction:
        return ORIGINAL_BITS / self.compression_ratio

    @property
    def average_index_bitwidth(self) -> Fraction:
        return Fraction(self.index_bits, self.params)

    @property
    def codebook_bits_per_param(self) -> Fraction:
        return Fraction(self.codebook_bits, self.params)

    def __add__(self, other: "CompressionReport") -> "CompressionReport":
        return CompressionReport(self.params + other.params, self.codebook_bits + other.codebook_bits,
                                 self.index_bits + other.index_bits)

    def as_lines(self, prefix: str = "") -> list[str]:
        return [
            f"{prefix}total_original_bits={self.total_original_bits}",
            f"{prefix}codebook_bits={self.codebook_bits}",
            f"{prefix}index_bits={self.index_bits}",
            f"{prefix}compression_ratio={float(self.compression_ratio):.4f}",
            f"{prefix}equivalent_bitwidth={float(self.equivalent_bitwidth):.6f}",
            f"{prefix}average_index_bitwidth={float(self.average_index_bitwidth):.6f}",
            f"{prefix}codebook_bits_per_param={float(self.codebook_bits_per_param):.6f}",
        ]


def aggregate(reports: Iterable[CompressionReport]) -> CompressionReport:
    reports = list(reports)
    total = reports[0]
    for r in reports[1:]:
        total = total + r
    return total


def _log2(k: int) -> int:
    return k.bit_length() - 1


def average_index_bitwidth(v1: int, k1: int, k2: int = 0) -> Fraction:
    """Index bits per weight of the main (+ residual) stage, ignoring padding."""
    return Fraction(_log2(k1), v1) + (Fraction(_log2(k2), v1) if k2 else 0)


def outlier_count(n: int, cfg: QuantConfig) -> int:
    if not cfg.outliers_enabled:
        return 0
    return int(Fraction(str(cfg.outlier_percent)) * n // 100)


def compression_report(m: int, n: int, cfg: QuantConfig, outlier_cols: int | None = None,
                       codebook_entry_bits: int = ORIGINAL_BITS) -> CompressionReport:
    """Bit accounting for one M x N matrix quantized under ``cfg``.

    Codebook entries cost ``codebook_entry_bits`` each (16 by default, the
    original dtype width). Index bits count every stored vector, padding
    included.
    """
    if outlier_cols is None:
        outlier_cols = outlier_count(n, cfg)
    if not 0 <= outlier_cols <= n:
        raise ValueError(f"outlier column count {outlier_cols} outside [0, {n}]")
    entries = cfg.group_num * cfg.v1 * (cfg.k1 + cfg.k2)
    index_bits = (n - outlier_cols) * _num_vectors(m, cfg.v1) * (_log2(cfg.k1) + (_log2(cfg.k2) if cfg.k2 else 0))
    if outlier_cols:
        entries += cfg.v0 * cfg.k0
        index_bits += outlier_cols * _num_vectors(m, cfg.v0) * _log2(cfg.k0)
    return CompressionReport(m * n, entries * codebook_entry_bits, index_bits)


def report_for(qm: QuantizedMatrix) -> CompressionReport:
    return compression_report(qm.rows, qm.cols, qm.config, len(qm.outlier_cols))


# -- container --------------------------------------------------------------


def _section(tag: int, payload: bytes) -> bytes:
    return _SECTION.pack(tag, len(payload), zlib.crc32(payload)) + payload


def _idx_section(role: Role, group: int, indices: np.ndarray, k: int) -> bytes:
    p = pack(indices, max(_log2(k), 1))
    head = struct.pack("<BIBQ", ROLE_CODES[role], group, p.bitwidth, p.count)
    return _section(TAG_IDX, head + p.data)


def to_bytes(qm: QuantizedMatrix) -> bytes:
    meta = {
        "format_version": 1,
        "rows": qm.rows,
        "cols": qm.cols,
        "config": qm.config.to_dict(),
        "outlier_cols": list(qm.outlier_cols),
        "bands": [[b.group_id, b.col_start, b.col_end] for b in qm.bands],
        "padded_rows": qm.padded_rows,
        "has_residual": qm.residual_indices is not None,
        "stats": {
            "proxy_loss": qm.stats.proxy_loss,
            "sum_delta_L": qm.stats.sum_delta_L,
            "frobenius_mse": qm.stats.frobenius_mse,
            "max_abs_err": qm.stats.max_abs_err,
        },
    }
    sections = [_section(TAG_META, json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())]
    for cb in qm.codebooks:
        head = struct.pack("<BIHI", ROLE_CODES[cb.role], cb.group_id, cb.vector_len, cb.k)
        sections.append(_section(TAG_CBOOK, head + cb.centroids.astype("<f4").tobytes()))
    pos = 0
    for band in qm.bands:
        count = len(qm.band_columns(band))
        sl = slice(pos, pos + count)
        sections.append(_idx_section(Role.MAIN, band.group_id, qm.main_indices[sl],
                                     qm.codebook(Role.MAIN, band.group_id).k))
        if qm.residual_indices is not None:
            sections.append(_idx_section(Role.RESIDUAL, band.group_id, qm.residual_indices[sl],
                                         qm.codebook(Role.RESIDUAL, band.group_id).k))
        pos += count
    if qm.outlier_cols:
        sections.append(_idx_section(Role.OUTLIER, 0, qm.outlier_indices, qm.codebook(Role.OUTLIER, 0).k))
    return MAGIC + struct.pack("<I", len(sections)) + b"".join(sections)


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CorruptContainer("unexpected end of container")
    return data


def from_bytes(blob: bytes) -> QuantizedMatrix:
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic; not a .vptq container")
    buf = io.BytesIO(blob)
    buf.seek(len(MAGIC))
    (nsec,) = struct.unpack("<I", _read(buf, 4))
    meta = None
    codebooks = []
    idx = {}
    for _ in range(nsec):
        tag, length, crc = _SECTION.unpack(_read(buf, _SECTION.size))
        payload = _read(buf, length)
        if zlib.crc32(payload) != crc:
            raise CorruptContainer(f"checksum mismatch in section tag {tag}")
        try:
            if tag == TAG_META:
                meta = json.loads(payload.decode("utf-8"))
            elif tag == TAG_CBOOK:
                role, group, v, k = struct.unpack_from("<BIHI", payload)
                cent = np.frombuffer(payload, dtype="<f4", offset=11)
                if cent.size != k * v:
                    raise CorruptContainer("codebook payload size mismatch")
                codebooks.append(Codebook(cent.reshape(k, v).astype(np.float32), _ROLE_BY_CODE[role], group))
            elif tag == TAG_IDX:
                role, group, bw, count = struct.unpack_from("<BIBQ", payload)
                idx[(_ROLE_BY_CODE[role], group)] = unpack(PackedIndices(bw, count, payload[14:]))
        except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
            raise CorruptContainer(f"malformed section tag {tag}: {exc}") from exc
    if meta is None:
        raise CorruptContainer("missing META section")
    if meta.get("format_version") != 1:
        raise FormatError(f"unsupported container version {meta.get('format_version')}")
    try:
        return _assemble(meta, codebooks, idx)
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptContainer(f"inconsistent container: {exc}") from exc


def _assemble(meta, codebooks, idx) -> QuantizedMatrix:
    cfg = QuantConfig.from_dict(meta["config"])
    m, n = meta["rows"], meta["cols"]
    outliers = tuple(meta["outlier_cols"])
    bands = tuple(GroupBand(*b) for b in meta["bands"])
    probe = QuantizedMatrix(m, n, cfg, outliers, bands, tuple(codebooks), None, None, None,
                            QuantStats(**meta["stats"]))
    nv1 = _num_vectors(m, cfg.v1)
    main, res = [], []
    for band in bands:
        ncol = len(probe.band_columns(band))
        main.append(idx[(Role.MAIN, band.group_id)].reshape(ncol, nv1))
        if meta["has_residual"]:
            res.append(idx[(Role.RESIDUAL, band.group_id)].reshape(ncol, nv1))
    if outliers:
        out_idx = idx[(Role.OUTLIER, 0)].reshape(len(outliers), _num_vectors(m, cfg.v0))
    else:
        out_idx = np.zeros((0, 0), dtype=np.int64)
    main_idx = np.concatenate(main).astype(np.int64) if main else np.zeros((0, nv1), dtype=np.int64)
    res_idx = np.concatenate(res).astype(np.int64) if res else None
    return QuantizedMatrix(m, n, cfg, outliers, bands, tuple(codebooks), main_idx, res_idx, out_idx,
                           probe.stats)


def serialize(qm: QuantizedMatrix, path) -> None:
    try:
        with atomic_open(path) as fh:
            fh.write(to_bytes(qm))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def deserialize(path) -> QuantizedMatrix:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return from_bytes(blob)
