"""Command-line front end.

Subcommands: run (sweep a config), trace (record / export / import /
replay), report (re-emit tables and plot data from a bundle), validate
(check a config or trace file).  Exit codes: 0 success, 1 configuration
or file-format error, 2 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from . import trace as trace_mod
from ._version import __version__
from .errors import ConfigError, TraceError
from .harness import (
    emit_reports,
    load_bundle,
    load_config,
    materialize_prompts,
    run_sweep,
    validate_config,
)
from .model import ModelConfig, init_model
from .policies import parse_policy


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract reserves 2 for
    # runtime failures, so route usage problems through ConfigError instead
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evictlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"evictlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep from a JSON config")
    run.add_argument("--config", required=True, help="path to the sweep config")
    run.add_argument("--out", default=None, help="output directory (overrides config)")
    run.add_argument("--workers", type=int, default=None, help="parallel cell workers")
    run.add_argument("--budgets", type=_int_list, default=None, help="override budgets, e.g. 8,16,32")
    run.add_argument(
        "--policy",
        action="append",
        default=None,
        help="override policies; repeatable, e.g. --policy h2o:recency_window=4",
    )
    run.add_argument("--max-tokens", type=int, default=None, help="override max generated tokens")
    run.add_argument(
        "--formats",
        default="csv,json,plotdata",
        help="comma-separated report formats (csv, json, plotdata, svg)",
    )

    tr = sub.add_parser("trace", help="record, convert, or replay traces")
    tr_sub = tr.add_subparsers(dest="trace_command", required=True)

    rec = tr_sub.add_parser("record", help="record a generation session to a trace file")
    rec.add_argument("--out", required=True, help="trace file to write")
    rec.add_argument("--policy", default="full", help="policy spec, e.g. snapkv_d:window=8")
    rec.add_argument("--budget", type=int, default=None, help="per-layer cache budget")
    rec.add_argument("--tokens", type=_int_list, default=None, help="prompt tokens, e.g. 5,9,3")
    rec.add_argument("--config", default=None, help="config supplying the model (and prompt fallback)")
    rec.add_argument("--max-tokens", type=int, default=32)
    rec.add_argument("--seed", type=int, default=None, help="override the model seed")
    rec.add_argument(
        "--full-rows",
        action="store_true",
        help="store unevicted attention rows and key vectors (needed for cross-policy replay)",
    )

    exp = tr_sub.add_parser("export", help="convert a binary trace to JSONL")
    exp.add_argument("input", help="trace file to read")
    exp.add_argument("output", help="JSONL file to write")

    imp = tr_sub.add_parser("import", help="convert a JSONL trace to the binary format")
    imp.add_argument("input", help="JSONL file to read")
    imp.add_argument("output", help="trace file to write")

    rep = tr_sub.add_parser("replay", help="re-run eviction decisions over a recorded trace")
    rep.add_argument("input", help="trace file to read")
    rep.add_argument("--policy", required=True, help="policy spec to replay")
    rep.add_argument("--budget", type=int, default=None, help="per-layer cache budget")

    report = sub.add_parser("report", help="emit tables and plot data from a bundle")
    report.add_argument("--bundle", required=True, help="path to bundle.json")
    report.add_argument("--out", default=None, help="output directory (defaults alongside bundle)")
    report.add_argument("--formats", default="csv,plotdata", help="comma-separated formats")

    val = sub.add_parser("validate", help="validate a config or trace file")
    val.add_argument("path", help="file to check")
    val.add_argument(
        "--kind",
        choices=("auto", "config", "trace"),
        default="auto",
        help="what the file is; auto sniffs the trace magic bytes",
    )
    return parser


def _cmd_run(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    if args.budgets is not None:
        raw["budgets"] = args.budgets
    if args.policy is not None:
        raw["policies"] = args.policy
    if args.max_tokens is not None:
        raw["max_tokens"] = args.max_tokens
    config = validate_config(raw)
    formats = [part for part in args.formats.split(",") if part]
    bundle = run_sweep(config, out_dir=args.out, workers=args.workers)
    out_dir = args.out if args.out is not None else config["output_dir"]
    written = emit_reports(bundle, formats=formats, out_dir=out_dir)
    for agg in bundle["aggregates"]:
        loss = agg["mean_attention_loss_total"]
        loss_text = "n/a" if loss is None else f"{loss:.6g}"
        print(
            f"{agg['policy']:<40} budget={agg['budget']!s:<6} rows={agg['rows']:<3} "
            f"mean_tokens={agg['mean_tokens']} attention_loss={loss_text}"
        )
    if bundle["n_errors"]:
        print(f"warning: {bundle['n_errors']} cells failed; see rows.csv", file=sys.stderr)
    for path in written:
        print(f"wrote {path}")
    return 0


def _model_from_config(path, seed=None):
    cfg = dict(load_config(path)["model"]) if path else {}
    if seed is not None:
        cfg["seed"] = seed
    return init_model(ModelConfig(**cfg))


def _cmd_trace(args) -> int:
    if args.trace_command == "record":
        parse_policy(args.policy)
        model = _model_from_config(args.config, args.seed)
        tokens = args.tokens
        if tokens is None:
            if args.config is None:
                raise ConfigError("trace record needs --tokens or a --config with prompts")
            tokens = materialize_prompts(load_config(args.config))[0]
        result = trace_mod.record(
            model,
            tokens,
            args.max_tokens,
            args.policy,
            args.budget,
            args.out,
            full_rows=args.full_rows,
        )
        print(
            f"wrote {args.out}: {result.n_processed} positions processed, "
            f"{len(result.tokens)} tokens emitted, terminated={result.terminated}"
        )
        return 0
    if args.trace_command == "export":
        trace = trace_mod.load(args.input)
        for warning in trace.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        trace_mod.export_jsonl(trace, args.output)
        print(f"wrote {args.output}: {len(trace.steps)} steps")
        return 0
    if args.trace_command == "import":
        trace = trace_mod.import_jsonl(args.input)
        for warning in trace.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        trace_mod.save(trace, args.output)
        print(f"wrote {args.output}: {len(trace.steps)} steps")
        return 0
    # replay
    trace = trace_mod.load(args.input)
    for warning in trace.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    result = trace_mod.replay(trace, args.policy, args.budget)
    counts = result.counters["decode"]
    print(f"replayed {result.steps} steps under {result.policy_label}")
    print(f"per-layer budgets: {result.budgets}")
    sizes = {key: len(value) for key, value in sorted(result.retained_at_end.items())}
    print(f"final retained sizes by (layer, head): {sizes}")
    print(
        f"decode-phase ops: mults={counts['mults']} comparisons={counts['comparisons']} "
        f"invocations={counts['invocations']}"
    )
    if result.attention_loss_map is not None:
        total = float(sum(sum(row) for row in result.attention_loss_map))
        print(f"cumulative attention loss vs recorded full rows: {total:.6g}")
    return 0


def _cmd_report(args) -> int:
    bundle = load_bundle(args.bundle)
    formats = [part for part in args.formats.split(",") if part]
    out_dir = args.out
    if out_dir is None:
        import os

        out_dir = os.path.dirname(os.path.abspath(args.bundle))
    for path in emit_reports(bundle, formats=formats, out_dir=out_dir):
        print(f"wrote {path}")
    return 0


def _cmd_validate(args) -> int:
    kind = args.kind
    if kind == "auto":
        with open(args.path, "rb") as f:
            kind = "trace" if f.read(4) == trace_mod.MAGIC else "config"
    if kind == "config":
        config = load_config(args.path)
        n_cells = (
            len(config["policies"])
            * len(config["budgets"])
            * len(config["seeds"])
            * (config["prompts"].get("count") or len(config["prompts"].get("token_lists") or []) or 1)
        )
        print(f"{args.path}: valid config ({n_cells} sweep cells)")
        return 0
    trace = trace_mod.load(args.path)
    print(
        f"{args.path}: valid trace, {len(trace.steps)} steps, "
        f"policy={trace.policy}, budget={trace.budget}, "
        f"model={trace.num_layers}x{trace.num_heads}x{trace.head_dim}, "
        f"full_rows={trace.full_rows}, external={trace.external}"
    )
    for warning in trace.warnings:
        print(f"warning: {warning}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "trace":
            return _cmd_trace(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_validate(args)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception:
        traceback.print_exc()
        print("error: unexpected failure; partial outputs are left in place", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
