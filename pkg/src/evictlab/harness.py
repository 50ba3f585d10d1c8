"""Sweep harness: config validation, cell execution, statistics, reports.

A sweep runs every (policy, budget, seed, prompt) cell, one isolated
generation session per cell, and aggregates per (policy, budget).
Aggregates are a pure function of the raw rows; wall-clock fields are the
only nondeterministic outputs and are excluded from determinism claims.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .engine import generate, resolve_budgets
from .errors import ConfigError
from .metrics import critical_retention, latency_per_token, throughput
from .model import ModelConfig, init_model
from .policies import make_policy, parse_policy

BUNDLE_SCHEMA = "evictlab-bundle-1"
WILSON_Z = 1.96

# fields whose values depend on the wall clock, excluded from determinism
TIMING_FIELDS = (
    "wall_time_s",
    "throughput_tps",
    "latency_ms_per_token",
    "mean_throughput_tps",
    "mean_latency_ms_per_token",
    "created_unix",
)

_MODEL_DEFAULTS = {
    "num_layers": 2,
    "num_heads": 2,
    "head_dim": 8,
    "mlp_hidden": 16,
    "vocab_size": 64,
    "seed": 0,
}
_PROMPT_DEFAULTS = {"kind": "synthetic", "count": 2, "length": 48, "seed": 1234}
_METRIC_DEFAULTS = {"attention_loss": True, "deviation": True, "critical_positions": None}
_TOP_DEFAULTS = {
    "max_tokens": 32,
    "seeds": [0],
    "workers": 1,
    "output_dir": "evictlab-out",
}


def _expect_int(errors, where, value, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        errors.append(f"{where}: expected an integer, got {value!r}")
        return None
    if minimum is not None and value < minimum:
        errors.append(f"{where}: must be >= {minimum}, got {value}")
        return None
    return value


def _check_unknown(errors, where, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            errors.append(f"{where}{key}: unknown key (accepted: {sorted(allowed)})")


def validate_config(config: dict) -> dict:
    """Normalize and validate a sweep config; raises ConfigError listing
    every problem found."""
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    errors: list[str] = []
    allowed_top = {"model", "prompts", "policies", "budgets", "metrics"} | set(_TOP_DEFAULTS)
    _check_unknown(errors, "", config, allowed_top)

    model = dict(_MODEL_DEFAULTS)
    given_model = config.get("model", {})
    if not isinstance(given_model, dict):
        errors.append("model: expected an object")
    else:
        _check_unknown(errors, "model.", given_model, _MODEL_DEFAULTS)
        for key in _MODEL_DEFAULTS:
            if key in given_model:
                value = _expect_int(errors, f"model.{key}", given_model[key], minimum=0)
                if value is not None:
                    model[key] = value
    try:
        ModelConfig(**model)
    except ConfigError as exc:
        errors.append(f"model: {exc}")

    prompts = dict(_PROMPT_DEFAULTS)
    given_prompts = config.get("prompts", {})
    if not isinstance(given_prompts, dict):
        errors.append("prompts: expected an object")
        given_prompts = {}
    kind = given_prompts.get("kind", "synthetic")
    if kind == "synthetic":
        _check_unknown(errors, "prompts.", given_prompts, _PROMPT_DEFAULTS)
        prompts.update({k: v for k, v in given_prompts.items() if k in _PROMPT_DEFAULTS})
        _expect_int(errors, "prompts.count", prompts["count"], minimum=1)
        _expect_int(errors, "prompts.seed", prompts["seed"], minimum=0)
        length = prompts["length"]
        lengths = length if isinstance(length, list) else [length]
        if not lengths:
            errors.append("prompts.length: empty list")
        for i, item in enumerate(lengths):
            _expect_int(errors, f"prompts.length[{i}]", item, minimum=1)
    elif kind == "inline":
        _check_unknown(errors, "prompts.", given_prompts, {"kind", "token_lists"})
        token_lists = given_prompts.get("token_lists")
        if not isinstance(token_lists, list) or not token_lists:
            errors.append("prompts.token_lists: expected a non-empty list of token lists")
        prompts = {"kind": "inline", "token_lists": token_lists}
    elif kind == "file":
        _check_unknown(errors, "prompts.", given_prompts, {"kind", "path"})
        path = given_prompts.get("path")
        if not isinstance(path, str):
            errors.append("prompts.path: expected a string path")
        prompts = {"kind": "file", "path": path}
    else:
        errors.append(f"prompts.kind: unknown kind {kind!r} (synthetic, inline, file)")

    policies = config.get("policies")
    specs = []
    if not isinstance(policies, list) or not policies:
        errors.append("policies: expected a non-empty list of policy specs")
        policies = []
    for i, text in enumerate(policies):
        try:
            specs.append(parse_policy(text))
        except ConfigError as exc:
            errors.append(f"policies[{i}]: {exc}")

    budgets = config.get("budgets")
    if not isinstance(budgets, list) or not budgets:
        errors.append("budgets: expected a non-empty list of integers")
        budgets = []
    for i, b in enumerate(budgets):
        _expect_int(errors, f"budgets[{i}]", b, minimum=1)

    # every (policy, budget) pair must clear the policy's minimum, with the
    # pyramid allocation applied
    if specs and budgets and all(isinstance(b, int) for b in budgets):
        for spec in specs:
            if spec.kind == "full":
                continue
            try:
                floor = make_policy(spec).min_budget()
            except ConfigError as exc:
                errors.append(f"policy {spec.label()}: {exc}")
                continue
            for b in budgets:
                try:
                    layer_budgets = resolve_budgets(spec, b, model["num_layers"])
                except ConfigError as exc:
                    errors.append(f"policy {spec.label()} at budget {b}: {exc}")
                    continue
                low = min(layer_budgets)
                if low < floor:
                    errors.append(
                        f"policy {spec.label()} at budget {b}: per-layer budget {low} "
                        f"is below the policy minimum {floor}"
                    )

    metrics = dict(_METRIC_DEFAULTS)
    given_metrics = config.get("metrics", {})
    if not isinstance(given_metrics, dict):
        errors.append("metrics: expected an object")
        given_metrics = {}
    _check_unknown(errors, "metrics.", given_metrics, _METRIC_DEFAULTS)
    for key in ("attention_loss", "deviation"):
        if key in given_metrics:
            if not isinstance(given_metrics[key], bool):
                errors.append(f"metrics.{key}: expected a boolean")
            else:
                metrics[key] = given_metrics[key]
    critical = given_metrics.get("critical_positions")
    if critical is not None:
        if not isinstance(critical, list):
            errors.append("metrics.critical_positions: expected a list of positions")
        else:
            for i, p in enumerate(critical):
                _expect_int(errors, f"metrics.critical_positions[{i}]", p, minimum=0)
            metrics["critical_positions"] = critical

    out = {"model": model, "prompts": prompts, "metrics": metrics}
    for key, default in _TOP_DEFAULTS.items():
        out[key] = config.get(key, default)
    _expect_int(errors, "max_tokens", out["max_tokens"], minimum=0)
    _expect_int(errors, "workers", out["workers"], minimum=1)
    if not isinstance(out["output_dir"], str):
        errors.append("output_dir: expected a string")
    if not isinstance(out["seeds"], list) or not out["seeds"]:
        errors.append("seeds: expected a non-empty list of integers")
    else:
        for i, s in enumerate(out["seeds"]):
            _expect_int(errors, f"seeds[{i}]", s, minimum=0)
    out["policies"] = [spec.label() for spec in specs]
    out["budgets"] = budgets

    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return out


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


def materialize_prompts(config: dict) -> list[list[int]]:
    """Resolve the prompt source into concrete token lists."""
    spec = config["prompts"]
    vocab = config["model"]["vocab_size"]
    if spec["kind"] == "synthetic":
        lengths = spec["length"] if isinstance(spec["length"], list) else [spec["length"]]
        prompts = []
        for i in range(spec["count"]):
            rng = np.random.default_rng([spec["seed"], i])
            n = lengths[i % len(lengths)]
            # token 0 is EOS, keep it out of synthetic prompts
            prompts.append([int(t) for t in rng.integers(1, vocab, size=n)])
        return prompts
    if spec["kind"] == "inline":
        token_lists = spec["token_lists"]
    else:
        try:
            with open(spec["path"], "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read prompts file {spec['path']}: {exc}") from exc
        token_lists = loaded.get("prompts") if isinstance(loaded, dict) else loaded
    if not isinstance(token_lists, list) or not token_lists:
        raise ConfigError("prompt source resolved to an empty list")
    prompts = []
    for i, tokens in enumerate(token_lists):
        if not isinstance(tokens, list) or not tokens:
            raise ConfigError(f"prompt {i}: expected a non-empty token list")
        for t in tokens:
            if not isinstance(t, int) or not 0 <= t < vocab:
                raise ConfigError(f"prompt {i}: token {t!r} outside vocabulary of size {vocab}")
        prompts.append([int(t) for t in tokens])
    return prompts


def run_cell(payload: dict) -> dict:
    """Execute one sweep cell; never raises, failures land in the row."""
    base = {
        "policy": payload["policy"],
        "budget": payload["budget"],
        "seed": payload["seed"],
        "prompt_index": payload["prompt_index"],
        "error": None,
    }
    try:
        model_cfg = dict(payload["model"])
        model_cfg["seed"] = payload["seed"]
        model = init_model(ModelConfig(**model_cfg))
        result = generate(
            model,
            payload["prompt"],
            payload["max_tokens"],
            payload["policy"],
            payload["budget"],
            collect_timeline=False,
            compute_metrics=payload["compute_metrics"],
        )
        critical = payload.get("critical")
        retention = None
        if critical:
            retention = critical_retention(
                critical, result.retained_union, sequence_length=result.n_processed
            )
        summary = result.metrics
        row = dict(base)
        row.update(
            {
                "prompt_length": len(payload["prompt"]),
                "tokens": result.tokens,
                "tokens_emitted": len(result.tokens),
                "terminated": result.terminated,
                "n_processed": result.n_processed,
                "prefill_passthrough": result.prefill_passthrough,
                "attention_loss_total": summary.attention_loss_total if summary else None,
                "attention_loss_map": summary.attention_loss_map if summary else None,
                "loss_steps": summary.loss_steps if summary else None,
                "deviation_mean": summary.deviation_mean if summary else None,
                "deviation_max": summary.deviation_max if summary else None,
                "retention_rate": retention,
                "opcounts": result.counters,
                "wall_time_s": result.wall_time_s,
                "throughput_tps": throughput(len(result.tokens), result.wall_time_s),
                "latency_ms_per_token": latency_per_token(len(result.tokens), result.wall_time_s),
            }
        )
        return row
    except Exception as exc:  # cell isolation: a failing cell must not kill the sweep
        base["error"] = f"{type(exc).__name__}: {exc}"
        return base


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    if not values:
        return None
    return sum(values) / len(values)


def aggregate_rows(rows) -> list[dict]:
    """Per-(policy, budget) aggregates; a pure function of the raw rows."""
    order: list[tuple] = []
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["policy"], row["budget"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    aggregates = []
    for key in order:
        group = groups[key]
        ok = [r for r in group if r["error"] is None]
        successes = sum(1 for r in ok if r["terminated"])
        trials = len(ok)
        interval = wilson_interval(successes, trials, WILSON_Z) if trials else None
        decode_totals = {"mults": 0, "comparisons": 0, "invocations": 0}
        for r in ok:
            for field in decode_totals:
                decode_totals[field] += r["opcounts"]["decode"][field]
        aggregates.append(
            {
                "policy": key[0],
                "budget": key[1],
                "rows": trials,
                "errors": len(group) - trials,
                "mean_tokens": _mean([r["tokens_emitted"] for r in ok]),
                "mean_attention_loss_total": _mean([r["attention_loss_total"] for r in ok]),
                "mean_deviation_mean": _mean([r["deviation_mean"] for r in ok]),
                "mean_deviation_max": _mean([r["deviation_max"] for r in ok]),
                "mean_retention_rate": _mean([r["retention_rate"] for r in ok]),
                "terminated_successes": successes,
                "trials": trials,
                "terminated_rate": successes / trials if trials else None,
                "wilson_low": interval[0] if interval else None,
                "wilson_high": interval[1] if interval else None,
                "decode_mults": decode_totals["mults"],
                "decode_comparisons": decode_totals["comparisons"],
                "decode_invocations": decode_totals["invocations"],
                "mean_throughput_tps": _mean([r["throughput_tps"] for r in ok]),
                "mean_latency_ms_per_token": _mean([r["latency_ms_per_token"] for r in ok]),
            }
        )
    return aggregates


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z):
    """Wilson score interval for a binomial proportion; None when trials=0.

    The boundary cases are pinned exactly: zero successes gives a lower
    bound of 0.0 and all successes gives an upper bound of 1.0.
    """
    if trials < 1:
        return None
    if not isinstance(successes, int) or not 0 <= successes <= trials:
        raise ConfigError(f"successes must be an integer in [0, {trials}], got {successes!r}")
    if z <= 0:
        raise ConfigError(f"z must be positive, got {z}")
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = phat + z * z / (2.0 * trials)
    half = z * math.sqrt(phat * (1.0 - phat) / trials + z * z / (4.0 * trials * trials))
    low = 0.0 if successes == 0 else max(0.0, (center - half) / denom)
    high = 1.0 if successes == trials else min(1.0, (center + half) / denom)
    return (low, high)


def run_sweep(config: dict, *, out_dir=None, workers=None) -> dict:
    """Run every cell, aggregate, and atomically write the bundle."""
    config = validate_config(config)
    prompts = materialize_prompts(config)
    compute_metrics = config["metrics"]["attention_loss"] or config["metrics"]["deviation"]
    payloads = []
    for policy in config["policies"]:
        for budget in config["budgets"]:
            for seed in config["seeds"]:
                for prompt_index, prompt in enumerate(prompts):
                    payloads.append(
                        {
                            "model": config["model"],
                            "prompt": prompt,
                            "prompt_index": prompt_index,
                            "policy": policy,
                            "budget": None if policy == "full" else budget,
                            "seed": seed,
                            "max_tokens": config["max_tokens"],
                            "compute_metrics": compute_metrics,
                            "critical": config["metrics"]["critical_positions"],
                        }
                    )
    n_workers = workers if workers is not None else config["workers"]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(run_cell, payloads))
    else:
        rows = [run_cell(p) for p in payloads]
    bundle = {
        "schema": BUNDLE_SCHEMA,
        "created_unix": time.time(),
        "config": config,
        "rows": rows,
        "aggregates": aggregate_rows(rows),
        "n_errors": sum(1 for r in rows if r["error"] is not None),
    }
    target = out_dir if out_dir is not None else config["output_dir"]
    if target:
        write_bundle(bundle, target)
    return bundle


def write_bundle(bundle: dict, out_dir) -> str:
    """Atomic bundle write: temp file in the target dir, then rename."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "bundle.json")
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".bundle-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(bundle, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_bundle(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            bundle = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read bundle {path}: {exc}") from exc
    if not isinstance(bundle, dict) or bundle.get("schema") != BUNDLE_SCHEMA:
        raise ConfigError(f"{path} is not a {BUNDLE_SCHEMA} bundle")
    return bundle


# -- report emission -----------------------------------------------------------


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_csv_cell(text: str):
    if text == "":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


AGGREGATE_COLUMNS = [
    "policy",
    "budget",
    "rows",
    "errors",
    "mean_tokens",
    "mean_attention_loss_total",
    "mean_deviation_mean",
    "mean_deviation_max",
    "mean_retention_rate",
    "terminated_successes",
    "trials",
    "terminated_rate",
    "wilson_low",
    "wilson_high",
    "decode_mults",
    "decode_comparisons",
    "decode_invocations",
    "mean_throughput_tps",
    "mean_latency_ms_per_token",
]

ROW_COLUMNS = [
    "policy",
    "budget",
    "seed",
    "prompt_index",
    "prompt_length",
    "tokens_emitted",
    "terminated",
    "attention_loss_total",
    "deviation_mean",
    "deviation_max",
    "retention_rate",
    "wall_time_s",
    "throughput_tps",
    "latency_ms_per_token",
    "error",
]


def _write_csv(path, columns, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for record in records:
            writer.writerow([_csv_cell(record.get(col)) for col in columns])


def read_aggregates_csv(path) -> list[dict]:
    """Inverse of the aggregates CSV: exact round-trip of every cell."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return [
            {col: _parse_csv_cell(cell) for col, cell in zip(header, line)} for line in reader
        ]


def _series_by_policy(aggregates, value_field):
    policies: list[str] = []
    for agg in aggregates:
        if agg["policy"] not in policies:
            policies.append(agg["policy"])
    series = []
    for policy in policies:
        cells = [a for a in aggregates if a["policy"] == policy]
        series.append(
            {
                "policy": policy,
                "budgets": [a["budget"] for a in cells],
                "values": [a[value_field] for a in cells],
            }
        )
    return series


def emit_reports(bundle: dict, formats=("csv", "json", "plotdata"), out_dir=None) -> list[str]:
    """Write CSV tables, the JSON bundle, and plot-data files; optionally SVG."""
    known = {"csv", "json", "plotdata", "svg"}
    formats = list(formats)
    unknown = [f for f in formats if f not in known]
    if unknown:
        raise ConfigError(f"unknown report formats {unknown} (accepted: {sorted(known)})")
    out_dir = out_dir if out_dir is not None else bundle["config"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    aggregates = bundle["aggregates"]
    written = []

    def emit(name: str, payload) -> None:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(path)

    if "json" in formats:
        written.append(write_bundle(bundle, out_dir))
    if "csv" in formats:
        agg_path = os.path.join(out_dir, "aggregates.csv")
        _write_csv(agg_path, AGGREGATE_COLUMNS, aggregates)
        written.append(agg_path)
        rows_path = os.path.join(out_dir, "rows.csv")
        _write_csv(rows_path, ROW_COLUMNS, bundle["rows"])
        written.append(rows_path)
    if "plotdata" in formats:
        emit(
            "plot_latency_vs_budget.json",
            {"x": "budget", "y": "mean_latency_ms_per_token",
             "series": _series_by_policy(aggregates, "mean_latency_ms_per_token")},
        )
        emit(
            "plot_length_vs_budget.json",
            {"x": "budget", "y": "mean_tokens",
             "series": _series_by_policy(aggregates, "mean_tokens")},
        )
        heatmaps = []
        for agg in aggregates:
            maps = [
                r["attention_loss_map"]
                for r in bundle["rows"]
                if r["error"] is None
                and r["policy"] == agg["policy"]
                and r["budget"] == agg["budget"]
                and r.get("attention_loss_map") is not None
            ]
            if not maps:
                continue
            matrix = np.mean(np.asarray(maps, dtype=np.float64), axis=0)
            heatmaps.append(
                {"policy": agg["policy"], "budget": agg["budget"], "matrix": matrix.tolist()}
            )
        emit("heatmap_attention_loss.json", {"cells": heatmaps})
    if "svg" in formats:
        written.extend(_emit_svg(bundle, out_dir))
    return written


def _emit_svg(bundle: dict, out_dir) -> list[str]:
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigError(
            "svg reports need matplotlib; install the 'plots' extra (pip install evictlab[plots])"
        ) from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    aggregates = bundle["aggregates"]
    for field, ylabel, name in (
        ("mean_latency_ms_per_token", "mean latency per token (ms)", "latency_vs_budget.svg"),
        ("mean_tokens", "mean output tokens", "length_vs_budget.svg"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for series in _series_by_policy(aggregates, field):
            xs = [b for b, v in zip(series["budgets"], series["values"]) if v is not None]
            ys = [v for v in series["values"] if v is not None]
            if xs:
                ax.plot(xs, ys, marker="o", label=series["policy"])
        ax.set_xlabel("budget")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, name)
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
