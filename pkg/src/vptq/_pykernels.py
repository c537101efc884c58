"""Pure numpy implementations of the hot kernels.

These must produce bit-identical results to ``_ckernels.pyx``: distances are
accumulated coordinate by coordinate in float64, each squared difference
rounded before the add, and ties resolve to the lowest centroid index.
"""

import numpy as np

_CHUNK_ELEMS = 1 << 22


def nearest(x, c):
    """Return ``(indices, squared_distances)`` of the nearest row of ``c`` for each row of ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    n, v = x.shape
    k = c.shape[0]
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(k, 1))
    ct = c.T.copy()
    for lo in range(0, n, step):
        xs = x[lo:lo + step]
        d = np.zeros((xs.shape[0], k), dtype=np.float64)
        for j in range(v):
            diff = xs[:, j, None] - ct[j][None, :]
            d += diff * diff
        am = np.argmin(d, axis=1)
        idx[lo:lo + step] = am
        best[lo:lo + step] = d[np.arange(xs.shape[0]), am]
    return idx, best


def pack(indices, bitwidth):
    indices = np.asarray(indices, dtype=np.uint64)
    if indices.size == 0:
        return b""
    shifts = np.arange(bitwidth, dtype=np.uint64)
    bits = ((indices[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack(data, bitwidth, count):
    """Return ``(values, pad_bits_clean)``."""
    if count == 0:
        return np.zeros(0, dtype=np.int64), all(b == 0 for b in data)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    used = count * bitwidth
    pad_clean = not bits[used:].any()
    weights = np.left_shift(np.int64(1), np.arange(bitwidth, dtype=np.int64))
    values = bits[:used].reshape(count, bitwidth).astype(np.int64) @ weights
    return values, pad_clean
