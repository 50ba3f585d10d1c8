"""Show that measured policy overhead matches the closed-form cost model.

Every policy invocation is metered: score-model multiplications and
selection comparisons are counted as they happen, split by phase.
opcount_model predicts the same totals from the run shape alone
(decode steps, budget, head dim, cadence). The two must agree exactly,
and the scaling trends are visible in the raw numbers: H2O's per-
eviction comparisons grow linearly with the budget while StreamingLLM
does constant work per step.

    python3 demos/04_operation_counts.py
"""

import numpy as np

from evictlab import ModelConfig, generate, init_model
from evictlab.metrics import opcount_model

N_DECODE = 24
BUDGET = 16


def main():
    model = init_model(ModelConfig())
    rng = np.random.default_rng(11)
    prompt = [int(t) for t in rng.integers(1, 64, size=40)]
    forced = [int(t) for t in rng.integers(1, 64, size=N_DECODE)]

    cases = [
        ("streaming_llm:sink_size=2", "streaming_llm", {}),
        ("h2o:recency_window=4", "h2o", {"recency_window": 4}),
        ("knorm", "knorm", {}),
        ("snapkv_d:window=4,kernel=3", "snapkv_d", {"w": 4}),
        ("rkv:window=3,buffer_interval=5", "rkv", {"w": 5, "rkv_window": 3}),
    ]
    print(f"decode steps {N_DECODE}, budget {BUDGET}, head dim "
          f"{model.config.head_dim}\n")
    header = (f"{'policy':<30} {'mults':>8} {'comparisons':>12} "
              f"{'invocations':>12} {'model agrees':>13}")
    print(header)
    print("-" * len(header))
    for spec, name, kwargs in cases:
        result = generate(model, prompt, N_DECODE, spec, BUDGET,
                          forced_tokens=forced)
        measured = result.counters["decode"]
        predicted = opcount_model(name, N_DECODE, BUDGET, model.config.head_dim,
                                  num_layers=2, num_heads=2, **kwargs)
        agrees = "yes" if measured == predicted else "NO"
        print(f"{spec:<30} {measured['mults']:>8} {measured['comparisons']:>12} "
              f"{measured['invocations']:>12} {agrees:>13}")

    flat = init_model(ModelConfig(num_layers=1, num_heads=1))
    prompt80 = [int(t) for t in rng.integers(1, 64, size=80)]
    print("\nH2O comparisons per eviction vs budget (slope 1, offset "
          "-recency_window):")
    for budget in (8, 16, 32, 64):
        result = generate(flat, prompt80, 16, "h2o:recency_window=4", budget,
                          forced_tokens=forced[:16])
        decode = result.counters["decode"]
        print(f"  budget {budget:>3}: "
              f"{decode['comparisons'] / decode['invocations']:>5.1f}")


if __name__ == "__main__":
    main()
