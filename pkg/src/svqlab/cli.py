"""Command-line entry point: ``svqlab <subcommand> --config file.toml [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
single ``error: kind=<Type> message=<text>`` line on stderr.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import experiments as ex
from .errors import SvqLabError, UsageError
from .svq import export_codebook

SUBCOMMANDS = ("covering", "bench", "noise", "sweep", "ablate", "train", "export-codebook", "eval")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svqlab", description="Sparse vector quantization experiments on synthetic data.",
        epilog=ex.config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, epilog=ex.config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes for sweep cells")
        p.add_argument("--quantizer", help="quantizer name; bench accepts a comma-separated list")
        p.add_argument("--sizes", type=_int_list, help="codebook sizes, comma-separated")
        p.add_argument("--etas", type=_float_list, help="noise proportions, comma-separated")
        p.add_argument("--thetas", type=_float_list, help="perplexity thresholds, comma-separated")
        if name in ("eval", "export-codebook"):
            p.add_argument("--checkpoint", help="checkpoint prefix (default: <out>/model)")
    return parser


def _dispatch(args):
    if not os.path.isfile(args.config):
        raise FileNotFoundError(args.config)
    cfg = ex.load_config(args.config)
    cfg = ex.with_overrides(cfg, seed=args.seed, sizes=args.sizes, etas=args.etas, thetas=args.thetas)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    out = args.out
    os.makedirs(out, exist_ok=True)
    cmd = args.command
    if cmd == "covering":
        path, _ = ex.run_covering(cfg, out)
    elif cmd == "bench":
        names = args.quantizer.split(",") if args.quantizer else None
        if names:
            cfg = ex.with_overrides(cfg, bench_quantizers=names)
        path, _ = ex.run_quantizer_benchmark(cfg, out, args.threads)
    elif cmd == "noise":
        path, _ = ex.run_noise_sweep(cfg, out, threads=args.threads)
    elif cmd == "sweep":
        path, _ = ex.run_codebook_sweep(cfg, out, threads=args.threads)
    elif cmd == "ablate":
        path, _ = ex.run_ablations(cfg, out, args.threads)
    elif cmd == "train":
        if args.quantizer:
            cfg = ex.with_overrides(cfg, quantizer=args.quantizer)
        ex.run_train(cfg, out)
        path = os.path.join(out, "train_report.csv")
    elif cmd == "eval":
        path, _ = ex.run_eval(args.checkpoint or os.path.join(out, "model"), out)
    else:  # export-codebook
        model, _, name = ex.load_checkpoint(args.checkpoint or os.path.join(out, "model"))
        if model.slot is None or model.slot.svq is None:
            raise UsageError(f"checkpoint quantizer {name!r} has no SVQ codebook to export")
        path = export_codebook(model.slot.svq, os.path.join(out, "codebook.csv"))
    print(f"wrote {path}")


def _error_line(exc):
    message = " ".join(str(exc).split())
    return f"error: kind={type(exc).__name__} message={message}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    try:
        _dispatch(args)
    except FileNotFoundError as exc:
        print(_error_line(UsageError(f"config or checkpoint not found: {exc.filename or exc}")), file=sys.stderr)
        return 2
    except (SvqLabError, ValueError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
