"""``fineq`` command line: gen, quantize, dequantize, eval, simulate.

Exit codes: 0 success, 1 validation, 2 I/O, 3 internal-invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codec import pack_tensor, unpack_tensor
from .errors import FineQError, InvariantError, ValidationError
from .evaluate import METHODS, error_metrics, evaluate
from .quant import (
    QuantConfig,
    average_bits,
    average_bits_total,
    dequantize_matrix,
    quantize_matrix,
    scheme_histogram,
    thread_count,
)
from .sim import EVENT_KINDS, SimConfig, run_matmul
from .synth import GenSpec, gen
from .tensor_io import FloatTensor, load_tensor, read_packed, save_tensor, write_packed

log = logging.getLogger("fineq")

SIM_RTOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _quant_cfg(args) -> QuantConfig:
    return QuantConfig(
        channel_axis=args.channel_axis,
        harmonize=not getattr(args, "no_harmonize", False),
        threads=thread_count(),
    )


def cmd_gen(args):
    spec = GenSpec(
        rows=args.rows,
        cols=args.cols,
        base_std=args.base_std,
        outlier_channel_fraction=args.outlier_fraction,
        outlier_magnitude_mult=args.outlier_mult,
        outlier_density_within_channel=args.outlier_density,
        seed=args.seed,
        channel_axis=args.channel_axis or "row",
    )
    t = gen(spec)
    save_tensor(t, args.output)
    print(f"wrote {t.rows}x{t.cols} tensor to {args.output}")
    return 0


def cmd_quantize(args):
    t = load_tensor(args.input)
    q = quantize_matrix(t, _quant_cfg(args))
    packed = pack_tensor(q)
    size = write_packed(packed, args.output)
    err = error_metrics(t, dequantize_matrix(q))
    summary = {
        "input": {"rows": t.rows, "cols": t.cols, "channel_axis": q.channel_axis},
        "harmonize": not args.no_harmonize,
        "avg_bits_payload": average_bits(q, warn=False),
        "avg_bits_total": average_bits_total(q),
        "padded": q.channel_len % 24 != 0,
        "scheme_histogram": scheme_histogram(q),
        "packed_bytes": size,
        **err,
    }
    print(f"avg bits (payload): {summary['avg_bits_payload']:.4f}")
    print(f"avg bits (total):   {summary['avg_bits_total']:.4f}")
    if summary["padded"]:
        print("warning: channel length is not a multiple of 24; padding inflates bits/weight")
    hist = " ".join(f"{k}:{v}" for k, v in summary["scheme_histogram"].items())
    print(f"schemes: {hist}")
    print(f"mse: {err['mse']:.6e}  max_abs_err: {err['max_abs_err']:.6e}")
    if args.report:
        _write_json(args.report, summary)
    return 0


def cmd_dequantize(args):
    q = unpack_tensor(read_packed(args.input))
    t = dequantize_matrix(q)
    save_tensor(t, args.output)
    print(f"wrote {t.rows}x{t.cols} tensor to {args.output}")
    return 0


def cmd_eval(args):
    t = load_tensor(args.input)
    report = evaluate(t, args.methods, args.bits, _quant_cfg(args))
    if args.simulate:
        if args.sim_n < 1:
            raise ValidationError("--sim-n must be >= 1")
        q = quantize_matrix(t, _quant_cfg(args))
        x = _random_activations(q.cols, args.sim_n, args.seed)
        cfg = _sim_cfg(args)
        _, stats = run_matmul(q, x, cfg)
        report.sim = {"config": cfg.to_dict(), "n": args.sim_n, "seed": args.seed, "stats": stats.to_dict()}
    print(report.table())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.to_json())
    return 0


def _random_activations(k: int, n: int, seed: int) -> FloatTensor:
    rng = np.random.default_rng(seed)
    return FloatTensor(rng.standard_normal((k, n)).astype(np.float32), name="activations")


def _parse_energy(items):
    weights = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep or key not in EVENT_KINDS:
            raise ValidationError(f"--energy-weight expects KIND=VALUE with KIND in {EVENT_KINDS}")
        try:
            weights[key] = float(val)
        except ValueError as exc:
            raise ValidationError(f"bad energy weight {item!r}") from exc
    return weights


def _sim_cfg(args) -> SimConfig:
    return SimConfig(
        array_rows=args.array_rows,
        array_cols=args.array_cols,
        decoders=args.decoders,
        early_termination=not args.no_early_termination,
        pipeline_overlap=args.overlap,
        energy_weights=_parse_energy(args.energy_weight),
    )


def cmd_simulate(args):
    packed = read_packed(args.input)
    if args.activations:
        x = load_tensor(args.activations)
    else:
        if args.random is None or args.random < 1:
            raise ValidationError("activation dims are empty: pass --activations or --random N >= 1")
        x = _random_activations(packed.cols, args.random, args.seed)
    if x.rows != packed.cols:
        raise ValidationError(f"activations have {x.rows} rows, weights have {packed.cols} cols")
    cfg = _sim_cfg(args)
    y, stats = run_matmul(packed, x, cfg)
    doc = {"config": cfg.to_dict(), "m": packed.rows, "k": packed.cols, "n": x.cols, "stats": stats.to_dict()}
    st = stats.stage_cycles
    print(f"total cycles: {stats.total_cycles} (sequential {stats.total_cycles_sequential}, "
          f"overlapped {stats.total_cycles_overlapped})")
    print("stages: " + " ".join(f"{k}={v}" for k, v in st.items()))
    print(f"selector activations: {stats.selector_activations}  adder ops: {stats.adder_tree_ops}")
    print(f"energy proxy: {stats.energy_proxy:.6g}")
    status = 0
    if args.check:
        ref = dequantize_matrix(unpack_tensor(packed)).data.astype(np.float64) @ x.data.astype(np.float64)
        scale = max(float(np.abs(ref).max()), np.finfo(np.float32).tiny)
        rel = float(np.abs(y.data - ref).max()) / scale
        ok = rel <= SIM_RTOL
        doc["check"] = {"max_rel_err": rel, "pass": ok}
        print(f"check: {'PASS' if ok else 'FAIL'} (max rel err {rel:.3e})")
        if not ok:
            status = InvariantError.exit_code
    if args.output:
        save_tensor(y, args.output)
    if args.report:
        _write_json(args.report, doc)
    return status


def _add_sim_flags(p):
    p.add_argument("--array-rows", type=int, default=64)
    p.add_argument("--array-cols", type=int, default=64)
    p.add_argument("--decoders", type=int, default=64)
    p.add_argument("--no-early-termination", action="store_true")
    p.add_argument("--overlap", action="store_true", help="report perfectly overlapped pipeline stages")
    p.add_argument("--energy-weight", action="append", metavar="KIND=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fineq", description="Fine-grained mixed-precision weight quantization")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic weight matrix")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--base-std", type=float, default=0.02)
    p.add_argument("--outlier-fraction", type=float, default=0.1)
    p.add_argument("--outlier-mult", type=float, default=8.0)
    p.add_argument("--outlier-density", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channel-axis", choices=("row", "col"))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("quantize", help="quantize a float tensor into the packed format")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--channel-axis", choices=("row", "col"))
    p.add_argument("--no-harmonize", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", help="expand a packed tensor back to f32")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("eval", help="compare FineQ against the baselines")
    p.add_argument("input")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--bits", nargs="+", type=int, default=[2])
    p.add_argument("--channel-axis", choices=("row", "col"))
    p.add_argument("--no-harmonize", action="store_true")
    p.add_argument("--simulate", action="store_true")
    p.add_argument("--sim-n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="run a packed tensor through the accelerator model")
    p.add_argument("input")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--activations")
    src.add_argument("--random", type=int, metavar="N", help="random N-column activations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", action="store_true")
    p.add_argument("--output")
    p.add_argument("--report")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except FineQError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
