"""Compare eviction policies on one prompt at a fixed cache budget.

Runs the same greedy generation under every registered policy, then
prints what each one emitted and what the eviction cost: the cumulative
attention loss (L1 between the full and the evicted attention rows,
summed over steps and heads) and the worst per-step hidden-state
deviation. The full policy is the zero-loss reference.

    python3 demos/01_policy_comparison.py
"""

import numpy as np

from evictlab import ModelConfig, generate, init_model

BUDGET = 10
MAX_TOKENS = 12
SPECS = [
    "full",
    "streaming_llm:sink_size=2",
    "h2o:recency_window=4",
    "knorm",
    "snapkv_d:window=4,kernel=3",
    "rkv:alpha=0.5,window=3,buffer_interval=6",
]


def main():
    model = init_model(ModelConfig())
    rng = np.random.default_rng(42)
    prompt = [int(t) for t in rng.integers(1, model.config.vocab_size, size=24)]
    print(f"prompt: {len(prompt)} tokens, budget {BUDGET} per head\n")

    reference = None
    header = f"{'policy':<42} {'output':<28} {'attn loss':>10} {'max dev':>9}"
    print(header)
    print("-" * len(header))
    for spec in SPECS:
        budget = None if spec == "full" else BUDGET
        result = generate(model, prompt, MAX_TOKENS, spec, budget)
        if reference is None:
            reference = result.tokens
        marker = "" if result.tokens == reference else " *"
        out = " ".join(str(t) for t in result.tokens)
        print(f"{result.policy_label:<42} {out:<28} "
              f"{result.metrics.attention_loss_total:>10.4f} "
              f"{result.metrics.deviation_max:>9.4f}{marker}")
    print("\n* output diverged from the full-cache reference")


if __name__ == "__main__":
    main()
