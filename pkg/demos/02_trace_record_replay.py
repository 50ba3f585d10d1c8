"""Record one full-cache run, then try eviction policies on it offline.

A trace recorded under the full policy with full_rows=True stores every
counterfactual attention row and key vector. Any policy can then be
replayed over those recordings without touching the model again: the
replay projects each recorded row onto the positions the candidate
policy would have kept and runs the identical decision kernels. This is
how one expensive run turns into a cheap policy screening.

    python3 demos/02_trace_record_replay.py
"""

import tempfile
from pathlib import Path

import numpy as np

from evictlab import ModelConfig, init_model
from evictlab import trace as tm

CANDIDATES = [
    ("streaming_llm:sink_size=2", 8),
    ("h2o:recency_window=4", 8),
    ("knorm", 8),
    ("snapkv_d:window=4,kernel=3", 8),
    ("rkv:alpha=0.5,window=3,buffer_interval=6", 8),
]


def main():
    model = init_model(ModelConfig())
    rng = np.random.default_rng(7)
    prompt = [int(t) for t in rng.integers(1, model.config.vocab_size, size=20)]

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "full.trace"
        result = tm.record(model, prompt, 8, "full", None, path, full_rows=True)
        size = path.stat().st_size
        print(f"recorded {len(result.timeline)} steps under the full policy "
              f"({size} bytes)\n")

        trace = tm.load(path)
        header = f"{'candidate policy':<44} {'attn loss':>10} {'decode comparisons':>19}"
        print(header)
        print("-" * len(header))
        for spec, budget in CANDIDATES:
            replayed = tm.replay(trace, spec, budget)
            loss = float(np.sum(replayed.attention_loss_map))
            comparisons = replayed.counters["decode"]["comparisons"]
            print(f"{replayed.policy_label:<44} {loss:>10.4f} {comparisons:>19}")

        print("\nretained sets after the last step (layer 0, head 0), budget 8:")
        for spec, budget in CANDIDATES:
            replayed = tm.replay(trace, spec, budget)
            kept = replayed.retained_at_end[(0, 0)]
            print(f"  {spec:<44} {list(kept)}")


if __name__ == "__main__":
    main()
