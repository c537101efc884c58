"""Command-line entry point.

Exit codes: 0 ok, 2 usage/validation, 3 corrupt data, 4 numeric failure.
Results are printed as ``key=value`` lines in a fixed order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from vptq import packing
from vptq.errors import ConfigError, CorruptData, FormatError, NumericError, ShapeError, VPTQError
from vptq.hessian import DEFAULT_DAMPING, HessianAccumulator, finalize, load_hessian, save_hessian
from vptq.quantizer import (
    QuantConfig,
    dequantize,
    load_manifest,
    proxy_loss,
    proxy_loss_decomposed,
    quantize_matrix,
    quantize_model,
)
from vptq.tensor_store import load_npy, save_npy

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _emit(pairs) -> None:
    for key, value in pairs:
        if isinstance(value, float):
            value = repr(value)
        print(f"{key}={value}")


def _require_file(path) -> None:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")


def _load_config(args) -> QuantConfig:
    _require_file(args.config)
    cfg = QuantConfig.from_json(args.config)
    seed = args.seed
    if seed is None and os.environ.get("VPTQ_SEED"):
        try:
            seed = int(os.environ["VPTQ_SEED"])
        except ValueError:
            raise UsageError(f"VPTQ_SEED={os.environ['VPTQ_SEED']!r} is not an integer")
    if seed is not None:
        cfg.kmeans.seed = seed
    return cfg


def cmd_hessian(args) -> int:
    if not args.damping > 0:
        raise UsageError("--damping must be positive")
    for path in args.activations:
        _require_file(path)
    acc = None
    for path in args.activations:
        x = load_npy(path).data
        if x.ndim == 1:
            x = x[:, None]
        if acc is None:
            acc = HessianAccumulator(x.shape[0])
        acc.update(x)
    hd = finalize(acc, args.damping)
    save_hessian(hd, args.out)
    diag = np.diag(hd.H)
    _emit([
        ("dim", hd.dim),
        ("sample_count", hd.sample_count),
        ("damping_fraction", hd.damping_fraction),
        ("min_diag", float(diag.min())),
        ("max_diag", float(diag.max())),
    ])
    return EXIT_OK


def _stats_pairs(qm):
    s = qm.stats
    return [
        ("proxy_loss", s.proxy_loss),
        ("sum_delta_L", s.sum_delta_L),
        ("frobenius_mse", s.frobenius_mse),
        ("max_abs_err", s.max_abs_err),
    ]


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    _require_file(args.weight)
    _require_file(args.hessian)
    w = load_npy(args.weight)
    if len(w.shape) != 2:
        raise UsageError(f"{args.weight}: weight must be a 2-D matrix")
    hd = load_hessian(args.hessian)
    qm = quantize_matrix(w, hd, cfg)
    packing.serialize(qm, args.out)
    report = packing.report_for(qm)
    _emit([("rows", qm.rows), ("cols", qm.cols), ("outlier_cols", len(qm.outlier_cols))] + _stats_pairs(qm))
    for line in report.as_lines():
        print(line)
    _emit([("container_bytes", os.path.getsize(args.out)), ("float32_bytes", 4 * qm.rows * qm.cols)])
    return EXIT_OK


def cmd_quantize_model(args) -> int:
    cfg = _load_config(args)
    _require_file(args.manifest)
    manifest = load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    results = quantize_model(manifest, cfg, args.workers)
    failed = 0
    for res in results:
        if not res.ok:
            failed += 1
            print(f"{res.name}.error={type(res.error).__name__}: {res.error}")
            continue
        packing.serialize(res.quantized, os.path.join(args.out_dir, f"{res.name}.vptq"))
        for key, value in _stats_pairs(res.quantized):
            print(f"{res.name}.{key}={value!r}")
    ok = [packing.report_for(r.quantized) for r in results if r.ok]
    if ok:
        for line in packing.aggregate(ok).as_lines("total."):
            print(line)
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_dequantize(args) -> int:
    _require_file(args.input)
    qm = packing.deserialize(args.input)
    save_npy(dequantize(qm), args.out)
    _emit([("rows", qm.rows), ("cols", qm.cols)])
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(args.weight)
    _require_file(args.quantized)
    w = load_npy(args.weight).data.astype(np.float64)
    qm = packing.deserialize(args.quantized)
    w_hat = dequantize(qm).data.astype(np.float64)
    if w.shape != w_hat.shape:
        raise ShapeError(f"weight shape {w.shape} != quantized shape {w_hat.shape}")
    dw = w_hat - w
    norm = float(np.linalg.norm(w))
    pairs = [
        ("frobenius_mse", float(np.mean(dw * dw))),
        ("max_abs_err", float(np.abs(dw).max())),
        ("relative_frobenius_error", float(np.linalg.norm(dw)) / norm if norm else 0.0),
    ]
    if args.hessian:
        _require_file(args.hessian)
        hd = load_hessian(args.hessian)
        trace = proxy_loss(w, w_hat, hd)
        diag, cross = proxy_loss_decomposed(w, w_hat, hd)
        pairs += [("proxy_loss", trace), ("proxy_loss_diag", diag), ("proxy_loss_cross", cross)]
        agree = abs(trace - (diag + cross)) <= 1e-9 * max(abs(trace), 1e-300)
        pairs.append(("decomposition_agrees", "yes" if agree else "no"))
        _emit(pairs)
        return EXIT_OK if agree else EXIT_NUMERIC
    _emit(pairs)
    return EXIT_OK


def _read_shapes(path):
    _require_file(path)
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}")
    if not isinstance(data, list) or not data:
        raise UsageError(f"{path}: shapes must be a non-empty JSON array")
    shapes = []
    for i, item in enumerate(data):
        if isinstance(item, dict):
            name, m, n = item.get("name", f"m{i}"), item.get("rows"), item.get("cols")
            count = int(item.get("count", 1))
        elif isinstance(item, list) and len(item) == 2:
            (m, n), name, count = item, f"m{i}", 1
        else:
            raise UsageError(f"{path}: entry {i} must be [rows, cols] or {{name, rows, cols}}")
        if not (isinstance(m, int) and isinstance(n, int) and m >= 1 and n >= 1 and count >= 1):
            raise UsageError(f"{path}: entry {i} has invalid dimensions")
        shapes.append((name, m, n, count))
    return shapes


def cmd_report(args) -> int:
    _require_file(args.config)
    cfg = QuantConfig.from_json(args.config)
    shapes = _read_shapes(args.shapes)
    reports = []
    for name, m, n, count in shapes:
        r = packing.compression_report(m, n, cfg, codebook_entry_bits=args.codebook_entry_bits)
        for line in r.as_lines(f"{name}."):
            print(line)
        reports += [r] * count
    for line in packing.aggregate(reports).as_lines("total."):
        print(line)
    print(f"total.index_bitwidth_formula={float(packing.average_index_bitwidth(cfg.v1, cfg.k1, cfg.k2)):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vptq", description="Second-order vector post-training quantization.")
    p.add_argument("-v", "--verbose", action="store_true", help="print tracebacks on failure")
    sub = p.add_subparsers(dest="command", required=True)

    h = sub.add_parser("hessian", help="build a damped proxy Hessian from activations")
    h.add_argument("--activations", nargs="+", required=True, help="N x s activation NPY files")
    h.add_argument("--out", required=True)
    h.add_argument("--damping", type=float, default=DEFAULT_DAMPING)
    h.set_defaults(func=cmd_hessian)

    q = sub.add_parser("quantize", help="quantize one weight matrix into a .vptq container")
    q.add_argument("--weight", required=True)
    q.add_argument("--hessian", required=True)
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=None, help="k-means seed (falls back to $VPTQ_SEED)")
    q.set_defaults(func=cmd_quantize)

    qm = sub.add_parser("quantize-model", help="quantize every entry of a JSON manifest")
    qm.add_argument("--manifest", required=True)
    qm.add_argument("--config", required=True)
    qm.add_argument("--out-dir", required=True)
    qm.add_argument("--workers", type=int, default=None)
    qm.add_argument("--seed", type=int, default=None)
    qm.set_defaults(func=cmd_quantize_model)

    d = sub.add_parser("dequantize", help="reconstruct a dense matrix from a container")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dequantize)

    e = sub.add_parser("eval", help="reconstruction error (and proxy loss) of a container")
    e.add_argument("--weight", required=True)
    e.add_argument("--quantized", required=True)
    e.add_argument("--hessian", default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compression accounting for declared shapes")
    r.add_argument("--config", required=True)
    r.add_argument("--shapes", required=True)
    r.add_argument("--codebook-entry-bits", type=int, default=packing.ORIGINAL_BITS,
                   help="bits charged per codebook entry (default 16; 1 counts entries only)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        code, exc_out = EXIT_USAGE, exc
    except (CorruptData, FormatError) as exc:
        code, exc_out = EXIT_CORRUPT, exc
    except NumericError as exc:
        code, exc_out = EXIT_NUMERIC, exc
    except VPTQError as exc:
        code, exc_out = EXIT_USAGE, exc
    if args.verbose:
        import traceback

        traceback.print_exception(exc_out)
    print(f"error: {exc_out}", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
