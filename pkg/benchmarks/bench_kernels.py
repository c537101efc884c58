"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Checks that both backends agree before timing them.
"""

import argparse
import timeit

import numpy as np

import vptq.codebook
import vptq.quantizer
from vptq import _pykernels, kernels
from vptq.hessian import HessianData
from vptq.quantizer import QuantConfig, quantize_matrix

try:
    from vptq import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_nearest(repeat):
    rng = np.random.default_rng(0)
    for d, v, k in [(512, 8, 256), (4096, 4, 16), (16384, 8, 256), (2048, 8, 4096)]:
        x = rng.standard_normal((d, v))
        c = rng.standard_normal((k, v)).astype(np.float32)
        row = {"py": best_of(lambda: _pykernels.nearest(x, c), repeat)}
        if _ckernels is not None:
            assert np.array_equal(_pykernels.nearest(x, c)[0], _ckernels.nearest(x, c)[0])
            row["c"] = best_of(lambda: _ckernels.nearest(x, c), repeat)
        yield f"nearest D={d} v={v} k={k}", row


def bench_pack(repeat):
    rng = np.random.default_rng(1)
    for bw, count in [(8, 1 << 20), (12, 1 << 20), (3, 1 << 20)]:
        idx = rng.integers(0, 1 << bw, count)
        blob = _pykernels.pack(idx, bw)
        row = {"py": best_of(lambda: _pykernels.pack(idx, bw), repeat)}
        row_u = {"py": best_of(lambda: _pykernels.unpack(blob, bw, count), repeat)}
        if _ckernels is not None:
            assert _ckernels.pack(idx, bw) == blob
            row["c"] = best_of(lambda: _ckernels.pack(idx, bw), repeat)
            row_u["c"] = best_of(lambda: _ckernels.unpack(blob, bw, count), repeat)
        yield f"pack bw={bw} n={count}", row
        yield f"unpack bw={bw} n={count}", row_u


def bench_pipeline(repeat):
    rng = np.random.default_rng(2)
    n = 256
    a = rng.standard_normal((n, n))
    hd = HessianData.from_matrix(a @ a.T / n + 0.01 * np.eye(n))
    w = rng.standard_normal((512, n)).astype(np.float32)
    cfg = QuantConfig(v1=8, k1=256, k2=16)
    row = {}
    for name, impl in [("py", _pykernels), ("c", _ckernels)]:
        if impl is None:
            continue
        vptq.codebook.kernels.nearest = impl.nearest
        vptq.quantizer.kernels.nearest = impl.nearest
        row[name] = best_of(lambda: quantize_matrix(w, hd, cfg), max(1, repeat // 2))
    yield "quantize_matrix 512x256 v=8 k=256 k2=16", row


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'case':45s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s}")
    for gen in (bench_nearest, bench_pack, bench_pipeline):
        for label, row in gen(args.repeat):
            py = row["py"] * 1e3
            c = row.get("c")
            if c is None:
                print(f"{label:45s} {py:12.2f} {'n/a':>12s}")
            else:
                print(f"{label:45s} {py:12.2f} {c * 1e3:12.2f} {py / (c * 1e3):7.1f}x")


if __name__ == "__main__":
    main()
