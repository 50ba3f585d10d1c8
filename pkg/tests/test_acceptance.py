"""Acceptance gate: one test per headline guarantee, one verdict line each.

Run with `pytest -v tests/test_acceptance.py` to see the checklist. Each
test states its tolerance inline; everything else in tests/ drills into
the same behavior at finer grain.
"""

import json
import math
import time

import numpy as np

from evictlab import (
    ModelConfig,
    attention_loss_step,
    decode_step,
    generate,
    init_model,
    output_deviation,
    start_generation,
    wilson_interval,
)
from evictlab import trace as tm
from evictlab.harness import TIMING_FIELDS, emit_reports, run_sweep
from evictlab.model import LayerWeights
from evictlab.policies import (
    h2o_evict,
    knorm_evict,
    rkv_decide,
    snapkvd_decide,
    streaming_llm_retain,
)
from evictlab.policies.rkv import _pairwise_max_cosine

CFG = ModelConfig(num_layers=2, num_heads=2, head_dim=8, mlp_hidden=16,
                  vocab_size=64, seed=0)

EVICTING_SPECS = [
    ("streaming_llm:sink_size=2", 8),
    ("h2o:recency_window=4", 10),
    ("knorm", 10),
    ("snapkv_d:window=4,kernel=3", 12),
    ("rkv:window=3,buffer_interval=6", 12),
]


def _greedy_logits_trail(model, spec, budget, prompt, max_tokens):
    """Mirror of the generate() loop that keeps every logits vector."""
    state = start_generation(model, spec, budget, prompt_len=len(prompt))
    trail = []
    logits = None
    for token in prompt:
        logits = decode_step(model, state, token)
        trail.append(logits.copy())
    state.phase = "decode"
    state.counters.phase = "decode"
    tokens = []
    for _ in range(max_tokens):
        token = int(np.argmax(logits))
        tokens.append(token)
        if token == 0:
            break
        logits = decode_step(model, state, token)
        trail.append(logits.copy())
    return tokens, trail


# 1 -------------------------------------------------------------------------


def test_every_policy_at_generous_budget_is_bitwise_identical_to_full():
    # 20 random (model seed, prompt) cases; for each, every evicting
    # policy with budget >= prompt + max_tokens must match the full
    # policy's tokens and every logits vector bit for bit (==, not isclose)
    rng = np.random.default_rng(100)
    cases = 0
    for _ in range(20):
        seed = int(rng.integers(0, 10000))
        model = init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=8,
                                       mlp_hidden=16, vocab_size=64, seed=seed))
        n = int(rng.integers(6, 20))
        prompt = [int(t) for t in rng.integers(1, 64, size=n)]
        ref_tokens, ref_trail = _greedy_logits_trail(model, "full", None, prompt, 6)
        budget = n + 6  # cache can hold the whole run
        for spec, _ in EVICTING_SPECS:
            tokens, trail = _greedy_logits_trail(model, spec, budget, prompt, 6)
            assert tokens == ref_tokens, spec
            assert len(trail) == len(ref_trail), spec
            for got, want in zip(trail, ref_trail):
                assert np.array_equal(got, want), spec
        cases += 1
    assert cases == 20


# 2 -------------------------------------------------------------------------


def test_retained_set_sizes_obey_the_budget_law_at_every_step():
    model = init_model(CFG)
    rng = np.random.default_rng(101)
    prompt = [int(t) for t in rng.integers(1, 64, size=28)]
    forced = [int(t) for t in rng.integers(1, 64, size=10)]
    # overflow-driven policies never exceed the budget, at any step
    for spec, budget in EVICTING_SPECS[:3]:
        result = generate(model, prompt, 10, spec, budget, forced_tokens=forced)
        for entry in result.timeline:
            assert max(len(v) for v in entry.values()) <= budget, spec
    # window-driven policies may hold budget + interval entries between
    # invocations but must be back at the budget on every boundary
    for spec, budget, interval in (("snapkv_d:window=4,kernel=3", 12, 4),
                                   ("rkv:window=3,buffer_interval=6", 12, 6)):
        result = generate(model, prompt, 10, spec, budget, forced_tokens=forced)
        n_prompt = len(prompt)
        assert max(len(v) for v in result.timeline[n_prompt - 1].values()) <= budget
        for i, entry in enumerate(result.timeline[n_prompt:], start=1):
            size = max(len(v) for v in entry.values())
            assert size <= budget + interval, spec
            if i % interval == 0:
                assert size <= budget, spec
        assert all(len(v) <= budget for v in result.retained_at_end.values()), spec


# 3 -------------------------------------------------------------------------


def _exhaustive_single_evict(values, positions, protected, budget, *, largest):
    if len(positions) <= budget:
        return sorted(positions)
    recent = set(sorted(positions)[len(positions) - protected:]) if protected else set()
    pool = [(v, p) for v, p in zip(values, positions) if p not in recent]
    key = (lambda vp: (-vp[0], vp[1])) if largest else (lambda vp: (vp[0], vp[1]))
    victim = sorted(pool, key=key)[0][1]
    return sorted(p for p in positions if p != victim)


def _exhaustive_windowed_select(scores, positions, w, budget):
    order = sorted(positions)
    by_pos = dict(zip(positions, scores))
    older, window = order[: len(order) - w], order[len(order) - w:]
    ranked = sorted(older, key=lambda p: (-by_pos[p], p))
    return sorted(ranked[: budget - w] + window)


def test_policy_decisions_match_exhaustive_oracles_on_1000_random_instances():
    # 1000 random instances per policy, positions drawn from 0..63,
    # heavy ties to exercise the break-toward-oldest rules; exact match
    rng = np.random.default_rng(102)
    started = time.perf_counter()
    for _ in range(1000):
        budget = int(rng.integers(2, 24))
        n = budget + 1
        positions = sorted(rng.choice(64, size=n, replace=False).tolist())
        sink = int(rng.integers(0, budget))
        assert streaming_llm_retain(positions, sink, budget) == (
            positions[:sink] + positions[n - (budget - sink):])
        scores = rng.choice([0.0, 0.1, 0.5, 1.0], size=n).tolist()
        recency = int(rng.integers(0, budget))
        assert h2o_evict(scores, positions, recency, budget) == (
            _exhaustive_single_evict(scores, positions, recency, budget, largest=False))
        norms = rng.choice([0.5, 1.0, 1.5, 2.0], size=n).tolist()
        protected = int(rng.integers(0, budget))
        assert knorm_evict(norms, positions, budget, protected) == (
            _exhaustive_single_evict(norms, positions, budget=budget,
                                     protected=protected, largest=True))
    for _ in range(1000):
        w = int(rng.integers(1, 6))
        budget = int(rng.integers(w + 1, w + 14))
        n = int(rng.integers(budget + 1, min(budget + 20, 64)))
        positions = sorted(rng.choice(64, size=n, replace=False).tolist())
        # observation-window voting: accumulate, max-pool, keep top scores
        rows = []
        for _ in range(int(rng.integers(1, w + 1))):
            probs = rng.random(n)
            rows.append((list(positions), (probs / probs.sum()).tolist()))
        votes = [0.0] * n
        for row_positions, row in rows:
            for i, v in enumerate(row):
                votes[i] += v
        kernel = int(rng.choice([1, 3, 5]))
        half = kernel // 2
        pooled = [max(votes[max(0, i - half): min(n, i + half + 1)]) for i in range(n)]
        assert snapkvd_decide(rows, positions, w, kernel, budget) == (
            _exhaustive_windowed_select(pooled, positions, w, budget))
        # importance/redundancy mix: normalize, subtract cosine redundancy
        accum = rng.random(n).tolist()
        keys = rng.normal(size=(n, 6))
        alpha = float(rng.choice([0.0, 0.3, 0.5, 1.0]))
        scores = np.asarray(accum)
        lo, hi = scores.min(), scores.max()
        normalized = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
        combined = (alpha * normalized - (1 - alpha) * _pairwise_max_cosine(keys)).tolist()
        assert rkv_decide(accum, keys, positions, alpha, budget, w) == (
            _exhaustive_windowed_select(combined[: n - w] + [np.inf] * w,
                                        positions, w, budget))
    assert time.perf_counter() - started < 60.0


# 4 -------------------------------------------------------------------------


def test_streaming_retention_follows_the_sink_plus_recency_closed_form():
    model = init_model(CFG)
    prompt = [5, 9, 3, 7, 11, 2, 8, 4, 13, 6, 12, 10]
    sink, budget = 2, 6
    result = generate(model, prompt, 8, f"streaming_llm:sink_size={sink}", budget,
                      forced_tokens=[1 + (i % 60) for i in range(8)])
    for step, entry in enumerate(result.timeline):
        n = step + 1
        if n <= budget:
            expected = list(range(n))
        else:
            expected = list(range(sink)) + list(range(n - (budget - sink), n))
        for retained in entry.values():
            assert list(retained) == expected


# 5 -------------------------------------------------------------------------


def _cache_free_forward(model, tokens):
    cfg = model.config
    d = cfg.head_dim
    n = len(tokens)
    x = np.stack([model.input_embedding(t, p) for p, t in enumerate(tokens)])
    for layer in model.layers:
        q_all, k_all, v_all = x @ layer.w_q, x @ layer.w_k, x @ layer.w_v
        attn = np.zeros_like(x)
        for h in range(cfg.num_heads):
            cols = slice(h * d, (h + 1) * d)
            for t in range(n):
                raw = k_all[: t + 1, cols] @ q_all[t, cols] / math.sqrt(d)
                e = np.exp(raw - raw.max())
                attn[t, cols] = (e / e.sum()) @ v_all[: t + 1, cols]
        x = x + attn @ layer.w_o
        x = x + np.maximum(x @ layer.w_1, 0.0) @ layer.w_2
    return x @ model.unembedding


def test_incremental_engine_matches_cache_free_forward_within_1e9():
    rng = np.random.default_rng(105)
    model = init_model(CFG)
    for _ in range(3):
        n = int(rng.integers(8, 33))
        tokens = [int(t) for t in rng.integers(1, 64, size=n)]
        reference = _cache_free_forward(model, tokens)
        state = start_generation(model, "full", None, prompt_len=n)
        for t, token in enumerate(tokens):
            logits = decode_step(model, state, token)
            assert np.abs(logits - reference[t]).max() < 1e-9


# 6 -------------------------------------------------------------------------


def test_attention_loss_is_zero_at_full_budget_bounded_and_exact_on_hand_case():
    model = init_model(CFG)
    prompt = [5, 9, 3, 7, 11]
    for spec, _ in EVICTING_SPECS:
        assert generate(model, prompt, 6, spec, 64).metrics.attention_loss_total == 0.0
    # total variation style bound: L1 between two distributions is <= 2
    rng = np.random.default_rng(106)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        full = rng.random(n)
        full = full / full.sum()
        k = int(rng.integers(1, n + 1))
        keep = sorted(rng.choice(n, size=k, replace=False).tolist())
        sub = full[keep] / full[keep].sum()
        loss = attention_loss_step(list(range(n)), full.tolist(), keep, sub.tolist())
        assert 0.0 <= loss <= 2.0 + 1e-12
    # evicting half of a uniform two-way split costs exactly 1.0
    assert abs(attention_loss_step([0, 1], [0.5, 0.5], [0], [1.0]) - 1.0) < 1e-9


# 7 -------------------------------------------------------------------------


def test_output_deviation_is_zero_at_full_budget_and_a_norm_when_mlp_degenerates():
    model = init_model(CFG)
    prompt = [5, 9, 3, 7, 11]
    for spec, _ in EVICTING_SPECS:
        result = generate(model, prompt, 6, spec, 64)
        assert result.metrics.deviation_max == 0.0, spec
    layer = model.layers[0]
    model.layers[0] = LayerWeights(w_q=layer.w_q, w_k=layer.w_k, w_v=layer.w_v,
                                   w_o=layer.w_o, w_1=layer.w_1,
                                   w_2=np.zeros_like(layer.w_2))
    rng = np.random.default_rng(107)
    for _ in range(10):
        x = rng.normal(size=CFG.model_dim)
        x_bar = rng.normal(size=CFG.model_dim)
        want = float(np.linalg.norm(x - x_bar))
        assert abs(output_deviation(model, 0, x, x_bar) - want) < 1e-12


# 8 -------------------------------------------------------------------------


def test_operation_counts_scale_with_budget_and_cadence_as_modeled():
    rng = np.random.default_rng(108)
    # window cadence: exactly ceil(n_decode / window) invocations per head
    model = init_model(CFG)
    prompt = [5, 9, 3, 7, 11, 2, 8, 4] * 3
    heads = CFG.num_layers * CFG.num_heads
    for n_decode in (5, 8, 9, 12):
        forced = [1 + (i % 60) for i in range(n_decode)]
        result = generate(model, prompt, n_decode, "snapkv_d:window=4,kernel=3", 10,
                          forced_tokens=forced)
        assert result.counters["decode"]["invocations"] == math.ceil(n_decode / 4) * heads
    # score-driven eviction: comparisons per eviction are linear in the
    # budget (slope 1, intercept -recency_window); R^2 > 0.99 required
    flat = init_model(ModelConfig(num_layers=1, num_heads=1, head_dim=8,
                                  mlp_hidden=16, vocab_size=64, seed=2))
    n_decode = 16
    forced = [int(t) for t in rng.integers(1, 64, size=n_decode)]
    prompt80 = [int(t) for t in rng.integers(1, 64, size=80)]
    budgets = [8, 16, 32, 64]
    per_eviction = []
    for budget in budgets:
        result = generate(flat, prompt80, n_decode, "h2o:recency_window=4", budget,
                          forced_tokens=forced)
        per_eviction.append(result.counters["decode"]["comparisons"]
                            / result.counters["decode"]["invocations"])
    slope, intercept = np.polyfit(budgets, per_eviction, 1)
    predicted = np.polyval([slope, intercept], budgets)
    residual = np.sum((np.asarray(per_eviction) - predicted) ** 2)
    total = np.sum((np.asarray(per_eviction) - np.mean(per_eviction)) ** 2)
    assert 1.0 - residual / total > 0.99
    assert per_eviction == [b - 4 for b in budgets]
    # sliding-window eviction does constant work per step, independent of
    # both the budget and the sequence length
    per_step = set()
    for budget in (6, 10, 14):
        for n in (8, 16):
            result = generate(flat, prompt80, n, "streaming_llm:sink_size=2",
                              budget, forced_tokens=forced[:n])
            decode = result.counters["decode"]
            per_step.add((decode["comparisons"] / n, decode["mults"]))
    assert per_step == {(1.0, 0)}  # one comparison per step, no arithmetic


# 9 -------------------------------------------------------------------------


def test_wilson_interval_pins_boundaries_and_matches_the_closed_form():
    assert wilson_interval(0, 100)[0] == 0.0
    assert wilson_interval(100, 100)[1] == 1.0
    z, n, phat = 1.96, 100, 0.81
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    margin = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    low, high = wilson_interval(81, 100)
    assert abs(low - (center - margin)) < 1e-9
    assert abs(high - (center + margin)) < 1e-9


# 10 ------------------------------------------------------------------------


def test_traces_round_trip_losslessly_and_replay_matches_live_runs(tmp_path):
    # single-layer model: the rows a full-cache recording stores are
    # exactly what an evicting run sees at its only layer, so replaying a
    # policy offline must reproduce a live run that processes the same
    # tokens, retained set for retained set
    rng = np.random.default_rng(110)
    cfg = ModelConfig(num_layers=1, num_heads=2, head_dim=8, mlp_hidden=16,
                      vocab_size=64, seed=9)
    model = init_model(cfg)
    for i in range(10):
        spec, min_budget = EVICTING_SPECS[i % len(EVICTING_SPECS)]
        budget = min_budget + int(rng.integers(0, 6))
        n = int(rng.integers(14, 30))
        prompt = [int(t) for t in rng.integers(1, 64, size=n)]
        forced = [int(t) for t in rng.integers(1, 64, size=6)]
        path = tmp_path / f"run{i}.trace"
        tm.record(model, prompt, 6, "full", None, path, full_rows=True,
                  forced_tokens=forced)
        original = path.read_bytes()
        trace = tm.load(path)
        resaved = tmp_path / f"resaved{i}.trace"
        tm.save(trace, resaved)
        assert resaved.read_bytes() == original
        jsonl = tmp_path / f"run{i}.jsonl"
        tm.export_jsonl(trace, jsonl)
        rebuilt = tmp_path / f"rebuilt{i}.trace"
        tm.save(tm.import_jsonl(jsonl), rebuilt)
        assert rebuilt.read_bytes() == original
        live = generate(model, prompt, 6, spec, budget, forced_tokens=forced)
        replayed = tm.replay(trace, spec, budget)
        assert replayed.timeline == [
            {k: tuple(v) for k, v in entry.items()} for entry in live.timeline
        ], spec
        assert replayed.retained_at_end == {
            k: tuple(v) for k, v in live.retained_at_end.items()
        }, spec


# 11 ------------------------------------------------------------------------


def test_harness_sweep_covers_the_grid_and_reruns_bit_identically(tmp_path):
    config = {
        "model": {"num_layers": 2, "num_heads": 2, "head_dim": 8,
                  "mlp_hidden": 16, "vocab_size": 64},
        "prompts": {"kind": "synthetic", "count": 2, "length": 18, "seed": 11},
        "policies": ["streaming_llm:sink_size=2", "h2o:recency_window=4"],
        "budgets": [6, 8, 10, 12],
        "max_tokens": 5,
        "seeds": [0],
        "output_dir": "",
    }
    first = run_sweep(config)
    second = run_sweep(config)
    assert len(first["aggregates"]) == 2 * 4
    assert {(a["policy"], a["budget"]) for a in first["aggregates"]} == {
        (p, b) for p in config["policies"] for b in config["budgets"]
    }
    assert first["n_errors"] == 0

    def strip(record):
        return {k: v for k, v in record.items() if k not in TIMING_FIELDS}

    assert [strip(r) for r in first["rows"]] == [strip(r) for r in second["rows"]]
    assert [strip(a) for a in first["aggregates"]] == [
        strip(a) for a in second["aggregates"]
    ]
    emit_reports(first, formats=("plotdata",), out_dir=str(tmp_path))
    with open(tmp_path / "plot_length_vs_budget.json") as f:
        plot = json.load(f)
    assert len(plot["series"]) == 2
    for series in plot["series"]:
        assert series["budgets"] == config["budgets"]
        assert len(series["values"]) == len(config["budgets"])
