"""``actgradq`` command-line entry point.

Every subcommand builds a result payload and renders it as JSON, CSV or
aligned text.  Errors go to stderr as one JSON object with a nonzero exit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import codec, collective, dbca, erroranalysis, layers, memmodel

EXIT_USAGE, EXIT_FAILURE = 2, 1


class CliError(Exception):
    def __init__(self, message: str, kind: str = "usage", code: int = EXIT_USAGE):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


class Result:
    def __init__(self, payload: dict, rows: Optional[List[dict]] = None, text: Optional[str] = None,
                 csv_text: Optional[str] = None):
        self.payload, self.rows, self.text, self.csv_text = payload, rows, text, csv_text

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return json.dumps(self.payload, indent=1, sort_keys=True, default=_jsonable) + "\n"
        if fmt == "csv":
            if self.csv_text is not None:
                return self.csv_text
            rows = self.rows if self.rows is not None else [_flatten(self.payload)]
            buf = io.StringIO()
            w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
            return buf.getvalue()
        if self.text is not None:
            return self.text
        return "".join(f"{k}: {v}\n" for k, v in _flatten(self.payload).items())


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = " ".join(str(x) for x in v)
        else:
            out[key] = v
    return out


# -- synthetic inputs ----------------------------------------------------------

def _add_input_flags(p, default_n=4096):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--normal", action="store_true", help="standard normal input (default)")
    g.add_argument("--const", type=float, metavar="V", help="every element equals V")
    g.add_argument("--uniform", type=float, nargs=2, metavar=("A", "B"), help="uniform in [A, B)")
    p.add_argument("--elements", type=int, default=default_n, help="number of elements")


def _synthetic(args, rng, n=None):
    n = args.elements if n is None else n
    if n < 0:
        raise CliError("--elements must be >= 0")
    if args.const is not None:
        return np.full(n, args.const)
    if args.uniform is not None:
        a, b = args.uniform
        if not a < b:
            raise CliError("--uniform needs A < B")
        return rng.uniform(a, b, n)
    return rng.standard_normal(n)


def _load_array(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    return np.loadtxt(p, dtype=np.float64, ndmin=1)


# -- subcommands ---------------------------------------------------------------

def cmd_quantize(args) -> Result:
    rng = np.random.default_rng(args.seed)
    x = _load_array(args.input) if args.input else _synthetic(args, rng)
    kind = codec.CodecKind.parse(args.codec)
    q = codec.quantize_blockwise(x, args.bits, args.block_size, kind)
    deq = q.dequantize()
    err = np.abs(deq - x)
    nz = x != 0
    rel = float(np.max(err[nz] / np.abs(x[nz]))) if nz.any() else 0.0
    payload = {"elements": int(x.size), "bit_width": args.bits, "block_size": args.block_size,
               "codec": kind.name, "mae": float(err.mean()) if x.size else 0.0,
               "max_abs_error": float(err.max()) if x.size else 0.0,
               "max_relative_error": rel, "stored_bytes": q.nbytes,
               "compression_vs_fp32": (4 * x.size / q.nbytes) if q.nbytes else 0.0,
               "compression_vs_bf16": (2 * x.size / q.nbytes) if q.nbytes else 0.0}
    if args.dump:
        codec.dump(q, args.dump)
        payload["dump"] = args.dump
        payload["dump_roundtrip_exact"] = codec.load(args.dump) == q
    payload["_plot"] = {"x": x, "error": deq - x}
    return Result(payload)


def cmd_error_sweep(args) -> Result:
    cases = {"1": ["CASE1_RECOMPUTE"], "2": ["CASE2_CACHE"],
             "both": ["CASE1_RECOMPUTE", "CASE2_CACHE"]}[args.case]
    reports = erroranalysis.bound_sweep(args.layer, cases, args.epsilons, args.trials, args.seed,
                                        dim=args.dim, d_k=args.d_k, workers=args.workers)
    dom = erroranalysis.dominance_rate(reports)
    slopes = erroranalysis.error_slopes(reports)
    summary = [{"layer": k[0], "case": k[1], "channel": k[2], "dim": k[3],
                "dominance": dom[k], "slope": slopes[k]} for k in sorted(dom)]
    lines = [f"{'layer':<13}{'case':<17}{'channel':<8}{'dim':>5}{'dominance':>11}{'slope':>8}"]
    for s in summary:
        lines.append(f"{s['layer']:<13}{s['case']:<17}{s['channel']:<8}{s['dim']:>5}"
                     f"{s['dominance']:>11.4f}{s['slope']:>8.3f}")
    payload = {"summary": summary, "reports": [r.as_row() for r in reports],
               "_plot": {"reports": reports}}
    return Result(payload, text="\n".join(lines) + "\n", csv_text=erroranalysis.reports_to_csv(reports))


def _policy(args) -> layers.ActivationPolicy:
    kind = codec.CodecKind.parse(args.codec)
    if args.policy == "full":
        pol = layers.ActivationPolicy.full()
    else:
        pol = layers.ActivationPolicy.agoq(args.bits, codec_kind=kind, block_size=args.block_size)
    if args.quantize_qkv:
        if args.policy == "full":
            raise CliError("--quantize-qkv needs a quantized policy")
        pol = pol.with_entry("ATTENTION", args.bits, "RECOMPUTE_INTERMEDIATES")
    return pol


def cmd_layer_error(args) -> Result:
    params = layers.LayerParams.init(M=args.hidden, h=args.h, L=args.seq_len, seed=args.seed,
                                     gated=not args.ungated, residual=args.residual)
    pol = _policy(args)
    res = layers.measure_layer_gradient_error(params, policy=pol, seed=args.seed)
    rows = [{"role": r, "MAE": v["MAE"], "normalized_L2": v["normalized_L2"]} for r, v in res.items()]
    text = "".join(f"{r['role']:<12}{r['normalized_L2']:>12.5f}{r['MAE']:>14.6g}\n" for r in rows)
    text = f"{'role':<12}{'norm_L2':>12}{'MAE':>14}\n" + text
    return Result({"policy": pol.to_dict(), "roles": res}, rows=rows, text=text)


def cmd_dbca_plan(args) -> Result:
    cfg = dbca.PipelineConfig(args.n_stages, args.micro_batches, args.interleave)
    plan = dbca.plan_bit_widths(cfg)
    payload = plan.to_dict(args.bytes_per_minibatch)
    if args.reuse_onto is not None:
        payload["reuse_check"] = dbca.plan_reuse_check(cfg, dbca.PipelineConfig(args.reuse_onto),
                                                       args.bytes_per_minibatch)
    rows = [{"stage": s.stage_index, "count": s.stored_minibatches, "raw_bits": s.raw_bits,
             "assigned_bits": s.assigned_bits} for s in plan.stages]
    text = f"counts:        {plan.counts}\nassigned bits: {plan.assigned_bits}\n" \
           f"peak check:    {payload['peak_check']['verdict']}\n"
    if "reuse_check" in payload:
        text += f"reuse onto {args.reuse_onto}: {payload['reuse_check']['verdict']}\n"
    return Result(payload, rows=rows, text=text)


def cmd_allreduce(args) -> Result:
    if args.workers < 1:
        raise CliError("P must be >= 1")
    rng = np.random.default_rng(args.seed)
    data = [_synthetic(args, rng) for _ in range(args.workers)]
    ws = collective.make_workers(data, args.block_size)
    oracle = collective.allreduce_oracle(ws)
    out, trace = collective.run_protocol_trace(ws, args.protocol, threads=args.threads)
    result = out[0]
    flagged = np.zeros(oracle.size, dtype=bool)
    for w in ws:
        flagged |= w.overflow_mask
    denom = float(np.linalg.norm(oracle))
    payload = {"protocol": args.protocol, "P": args.workers, "elements": int(oracle.size),
               "overflow_count": int(flagged.sum()),
               "max_abs_error_vs_oracle": float(np.max(np.abs(result - oracle))) if oracle.size else 0.0,
               "relative_l2_vs_oracle": float(np.linalg.norm(result - oracle)) / denom if denom else 0.0,
               "all_ranks_identical": all(np.array_equal(o, out[0]) for o in out),
               "messages": len(trace),
               "bytes_sent_per_rank": [trace.sent_bytes(r) for r in range(args.workers)],
               "result_first": float(result[0]) if result.size else None}
    if args.trace:
        Path(args.trace).write_text(trace.to_jsonl())
        payload["trace"] = args.trace
    payload["_plot"] = {"oracle": oracle, "result": result}
    return Result(payload)


def cmd_memory_table(args) -> Result:
    schemes = list(memmodel.Scheme) if args.scheme == "all" else [memmodel.Scheme.parse(args.scheme)]
    tables = {memmodel.scheme_table(s).scheme.value: memmodel.scheme_table(s).as_dict() for s in schemes}
    payload = {"unit": "U = batch * seq_len * hidden * 2 bytes", "schemes": tables}
    return Result(payload, text=memmodel.render_text(schemes), csv_text=memmodel.render_csv(schemes))


COMMANDS: Dict[str, Callable] = {
    "quantize": cmd_quantize, "error-sweep": cmd_error_sweep, "layer-error": cmd_layer_error,
    "dbca-plan": cmd_dbca_plan, "allreduce-sim": cmd_allreduce, "memory-table": cmd_memory_table,
}


COMMON_FLAGS = ("seed", "out", "format", "config", "plot")


def _common(suppress: bool) -> _Parser:
    # subcommand copies must not clobber values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0))
    common.add_argument("--out", default=d(None), help="write output here instead of stdout")
    common.add_argument("--format", choices=["json", "csv", "text"], default=d("text"))
    common.add_argument("--config", default=d(None), help="JSON file with defaults for any flag (flags win)")
    common.add_argument("--plot", action="store_true", default=d(False),
                        help="also render a PNG next to --out (needs the 'plot' extra)")
    return common


def build_parser() -> _Parser:
    parser = _Parser(prog="actgradq", description="Quantized activation/gradient experiments.",
                     parents=[_common(False)])
    common = _common(True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("quantize", parents=[common], help="block-wise quantize a tensor")
    p.add_argument("--input", help=".npy or whitespace-separated text file")
    _add_input_flags(p)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--block-size", type=int, default=codec.DEFAULT_BLOCK_SIZE)
    p.add_argument("--codec", default="linear", help="linear, fp4 (e2m1) or fp8 (e4m3)")
    p.add_argument("--dump", help="write the quantized tensor to this file")

    p = sub.add_parser("error-sweep", parents=[common], help="empirical error vs first-order bound")
    p.add_argument("--layer", default="rmsnorm", help="rmsnorm, silu_mul, rmsnorm_gemm, attention")
    p.add_argument("--case", choices=["1", "2", "both"], default="both")
    p.add_argument("--epsilons", type=float, nargs="+", default=[1e-2, 1e-3, 1e-4])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--dim", type=int, default=64, help="vector length d, or sequence length L for attention")
    p.add_argument("--d-k", type=int, default=16, help="attention head size")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("layer-error", parents=[common], help="per-role gradient error of the toy layer")
    p.add_argument("--policy", choices=["agoq", "full"], default="agoq")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--codec", default="linear")
    p.add_argument("--block-size", type=int, default=codec.DEFAULT_BLOCK_SIZE)
    p.add_argument("--quantize-qkv", action="store_true", help="also store Q, K, V quantized")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--h", type=int, default=4, choices=[4, 8])
    p.add_argument("--ungated", action="store_true")
    p.add_argument("--residual", action="store_true")

    p = sub.add_parser("dbca-plan", parents=[common], help="per-stage activation bit-widths")
    p.add_argument("n_stages", type=int)
    p.add_argument("--micro-batches", type=int)
    p.add_argument("--interleave", type=int, default=2)
    p.add_argument("--bytes-per-minibatch", type=float, default=1.0,
                   help="activation bytes of one mini-batch at 16 bits")
    p.add_argument("--reuse-onto", type=int, metavar="N", help="also check this plan on N stages")

    p = sub.add_parser("allreduce-sim", parents=[common], help="simulate FP8 all-reduce")
    p.add_argument("workers", type=int, metavar="P")
    _add_input_flags(p)
    p.add_argument("--protocol", choices=list(collective.PROTOCOLS), default="decomposed")
    p.add_argument("--block-size", type=int, default=codec.DEFAULT_BLOCK_SIZE)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--trace", help="write the message trace here as JSON lines")

    p = sub.add_parser("memory-table", parents=[common], help="activation memory per operation")
    p.add_argument("--scheme", default="all", help="all, megatron, coat or agoq")
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise CliError("a subcommand is required: " + ", ".join(COMMANDS))
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}")
        if not isinstance(cfg, dict):
            raise CliError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(vars(args))
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices[args.command]
        parser.set_defaults(**{k: v for k, v in cfg.items() if k in COMMON_FLAGS})
        sub.set_defaults(**{k: v for k, v in cfg.items() if k not in COMMON_FLAGS})
        args = parser.parse_args(argv)
    return args


def _emit_error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = _parse(argv)
        result = COMMANDS[args.command](args)
        plot_data = result.payload.pop("_plot", None)
        text = result.render(args.format)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        if args.plot:
            from . import plotting
            target = Path(args.out).with_suffix(".png") if args.out else Path(f"{args.command}.png")
            plotting.render(args.command, result.payload, plot_data, target)
    except CliError as e:
        return _emit_error(e.kind, str(e), e.code)
    except (ValueError, KeyError, OSError, collective.ProtocolError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        return _emit_error(type(e).__name__, str(msg), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
