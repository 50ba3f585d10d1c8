"""Shape the cache budget across layers instead of spending it evenly.

A `+pyramid` suffix on any policy reallocates the total per-layer
budget linearly from wide early layers to a narrow top, keeping the
overall cache size fixed. beta controls the steepness (beta=1 is flat,
large beta pins the last layer at the window floor), and every layer
still gets at least the observation window the base policy needs.

    python3 demos/05_layer_budgets.py
"""

import numpy as np

from evictlab import ModelConfig, generate, init_model, resolve_budgets


def main():
    print("per-layer budgets for 8 layers, 128 entries per layer on average:")
    for beta in (1.0, 2.0, 4.0, 1e9):
        budgets = resolve_budgets(f"h2o:recency_window=4+pyramid:beta={beta},window=8",
                                  128, 8)
        label = f"beta={beta:g}"
        print(f"  {label:<10} {budgets}  (sum {sum(budgets)})")

    model = init_model(ModelConfig())
    rng = np.random.default_rng(3)
    prompt = [int(t) for t in rng.integers(1, 64, size=26)]
    flat_spec = "h2o:recency_window=2"
    shaped_spec = "h2o:recency_window=2+pyramid:beta=3,window=4"
    print("\nsame total cache, flat vs shaped (2-layer reference model):")
    for spec in (flat_spec, shaped_spec):
        result = generate(model, prompt, 10, spec, 10)
        sizes = {layer: len(result.retained_at_end[(layer, 0)])
                 for layer in range(model.config.num_layers)}
        print(f"  {result.policy_label}")
        print(f"    per-layer budgets {result.budgets}, "
              f"final live entries per layer {sizes}, "
              f"attention loss {result.metrics.attention_loss_total:.4f}")


if __name__ == "__main__":
    main()
