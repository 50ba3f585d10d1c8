"""Sweep policies across budgets with the experiment harness.

The harness turns a config dict into the full cross product of
policy x budget x seed x prompt, runs every cell in isolation, and
aggregates per (policy, budget): mean attention loss, mean output
length, and a Wilson score interval over how often generation
terminated on its own. Reports land as CSV/JSON next to the bundle.

    python3 demos/03_budget_sweep.py
"""

import tempfile
from pathlib import Path

from evictlab.harness import emit_reports, run_sweep

CONFIG = {
    "model": {"num_layers": 2, "num_heads": 2, "head_dim": 8,
              "mlp_hidden": 16, "vocab_size": 64},
    "prompts": {"kind": "synthetic", "count": 3, "length": 24, "seed": 5},
    "policies": ["streaming_llm:sink_size=2", "h2o:recency_window=4", "knorm"],
    "budgets": [6, 10, 14, 18],
    "max_tokens": 16,
    "seeds": [0],
}


def main():
    bundle = run_sweep(CONFIG)
    print(f"ran {len(bundle['rows'])} cells, {bundle['n_errors']} errors\n")

    header = (f"{'policy':<28} {'budget':>6} {'attn loss':>10} "
              f"{'mean len':>9} {'term rate (wilson)':>24}")
    print(header)
    print("-" * len(header))
    for agg in bundle["aggregates"]:
        if agg["wilson_low"] is None:
            wilson = "n/a"
        else:
            wilson = f"[{agg['wilson_low']:.3f}, {agg['wilson_high']:.3f}]"
        print(f"{agg['policy']:<28} {agg['budget']:>6} "
              f"{agg['mean_attention_loss_total']:>10.4f} "
              f"{agg['mean_tokens']:>9.2f} {wilson:>24}")

    with tempfile.TemporaryDirectory() as tmp:
        paths = emit_reports(bundle, formats=("csv", "plotdata"), out_dir=tmp)
        print("\nreport files a real run would keep:")
        for p in paths:
            print(f"  {Path(p).name}")


if __name__ == "__main__":
    main()
