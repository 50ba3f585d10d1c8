import numpy as np
import pytest

from evictlab import ConfigError, EngineError
from evictlab.policies import (
    h2o_evict,
    knorm_evict,
    max_pool_1d,
    oracle_topk,
    rkv_decide,
    snapkv_prefill,
    snapkvd_decide,
    streaming_llm_retain,
    top_k_positions,
)
from evictlab.policies.h2o import h2o_update
from evictlab.policies.rkv import _pairwise_max_cosine


def _oracle_streaming(positions, sink, budget):
    positions = sorted(positions)
    if len(positions) <= budget:
        return positions
    return positions[:sink] + positions[len(positions) - (budget - sink) :]


def _oracle_single_evict(values, positions, protected_count, budget, *, evict_largest):
    # exhaustive reference: sort unprotected by (value, position) and drop one
    positions = [int(p) for p in positions]
    if len(positions) <= budget:
        return sorted(positions)
    recent = set(sorted(positions)[len(positions) - protected_count :]) if protected_count else set()
    candidates = [(v, p) for v, p in zip(values, positions) if p not in recent]
    if evict_largest:
        victim = sorted(candidates, key=lambda vp: (-vp[0], vp[1]))[0][1]
    else:
        victim = sorted(candidates, key=lambda vp: (vp[0], vp[1]))[0][1]
    return sorted(p for p in positions if p != victim)


def _oracle_pool(x, kernel):
    half = kernel // 2
    n = len(x)
    return [max(x[max(0, i - half) : min(n, i + half + 1)]) for i in range(n)]


def _oracle_windowed_select(scores, positions, w, budget):
    # keep the w newest wholesale, then exhaustively top-(budget-w) the rest
    order = sorted(positions)
    by_pos = dict(zip(positions, scores))
    older = order[: len(order) - w]
    window = order[len(order) - w :]
    ranked = sorted(older, key=lambda p: (-by_pos[p], p))
    return sorted(ranked[: budget - w] + window)


# -- top-k / pooling primitives ------------------------------------------------


def test_top_k_matches_oracle_randomized():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 40))
        values = rng.choice([0.0, 0.5, 1.0, 2.0], size=n)  # heavy ties
        positions = rng.permutation(n) + 10
        k = int(rng.integers(0, n + 1))
        got = top_k_positions(values, positions, k)
        if k == 0:
            assert got == []
            continue
        want = oracle_topk(values, positions, (), min(k, n))
        assert set(got) == want
        assert got == sorted(got)


def test_top_k_tie_prefers_low_position():
    got = top_k_positions([1.0, 1.0, 1.0], [7, 3, 5], 2)
    assert got == [3, 5]
    got = top_k_positions([1.0, 1.0, 1.0], [7, 3, 5], 2, prefer_low_position=False)
    assert got == [5, 7]


def test_oracle_topk_validates():
    with pytest.raises(ConfigError):
        oracle_topk([1.0], [0], (), 2)
    with pytest.raises(ConfigError):
        oracle_topk([1.0], [0], (), 1, tie_rule="sideways")


def test_max_pool_matches_slice_oracle():
    rng = np.random.default_rng(1)
    for kernel in (1, 3, 5, 7):
        for _ in range(50):
            x = rng.normal(size=int(rng.integers(1, 30)))
            assert max_pool_1d(x, kernel).tolist() == _oracle_pool(x.tolist(), kernel)


def test_max_pool_rejects_even_kernel():
    with pytest.raises(ConfigError):
        max_pool_1d(np.ones(4), 2)


# -- streaming -----------------------------------------------------------------


def test_streaming_closed_form_randomized():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(1, 64))
        start = int(rng.integers(0, 5))
        positions = list(range(start, start + n))
        rng.shuffle(positions)
        sink = int(rng.integers(0, 6))
        budget = int(rng.integers(sink + 1, sink + 20))
        assert streaming_llm_retain(positions, sink, budget) == _oracle_streaming(
            positions, sink, budget
        )


def test_streaming_identity_under_budget():
    assert streaming_llm_retain([0, 1, 2], 1, 8) == [0, 1, 2]


def test_streaming_budget_must_exceed_sink():
    with pytest.raises(ConfigError):
        streaming_llm_retain([0, 1, 2, 3, 4], 4, 4)


# -- heavy-hitter --------------------------------------------------------------


def test_h2o_update_accumulates_and_counts():
    state = {}
    h2o_update(state, [0, 1], [0.25, 0.75])
    h2o_update(state, [0, 1, 2], [0.1, 0.3, 0.6])
    assert state[0] == (0.35, 2)
    assert state[2] == (0.6, 1)
    with pytest.raises(EngineError):
        h2o_update(state, [0, 1], [0.5])
    with pytest.raises(EngineError):
        h2o_update(state, [0, 1], [0.0, 0.0])


def test_h2o_evict_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(400):
        budget = int(rng.integers(2, 32))
        rw = int(rng.integers(0, budget))
        positions = sorted(rng.choice(64, size=budget + 1, replace=False).tolist())
        scores = rng.choice([0.0, 0.1, 0.5, 1.0], size=budget + 1).tolist()
        got = h2o_evict(scores, positions, rw, budget)
        want = _oracle_single_evict(scores, positions, rw, budget, evict_largest=False)
        assert got == want


def test_h2o_evict_tie_drops_oldest():
    assert h2o_evict([0.5, 0.5, 0.5], [4, 2, 9], 0, 2) == [4, 9]


def test_h2o_evict_protects_recent():
    # position 9 has the lowest score but sits in the recency window
    assert h2o_evict([0.9, 0.4, 0.1], [2, 4, 9], 1, 2) == [2, 9]


def test_h2o_evict_contract_errors():
    with pytest.raises(ConfigError):
        h2o_evict([0.1] * 5, list(range(5)), 4, 4)
    with pytest.raises(EngineError):
        h2o_evict([0.1] * 6, list(range(6)), 1, 4)  # two entries over budget
    assert h2o_evict([0.1, 0.2], [0, 1], 1, 4) == [0, 1]  # under budget: identity


# -- key-norm ------------------------------------------------------------------


def test_knorm_evict_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(400):
        budget = int(rng.integers(2, 32))
        protected = int(rng.integers(0, budget))
        positions = sorted(rng.choice(64, size=budget + 1, replace=False).tolist())
        norms = rng.choice([0.5, 1.0, 1.5, 2.0], size=budget + 1).tolist()
        got = knorm_evict(norms, positions, budget, protected)
        want = _oracle_single_evict(norms, positions, protected, budget, evict_largest=True)
        assert got == want


def test_knorm_tie_drops_oldest_largest():
    assert knorm_evict([2.0, 2.0, 1.0], [3, 5, 8], 2, 0) == [5, 8]


def test_knorm_protected_recent_survives():
    # newest has the largest norm but is protected
    assert knorm_evict([1.0, 1.5, 9.0], [0, 1, 2], 2, 1) == [0, 2]


def test_knorm_contract_errors():
    with pytest.raises(ConfigError):
        knorm_evict([1.0] * 3, [0, 1, 2], 2, 2)
    with pytest.raises(EngineError):
        knorm_evict([1.0] * 4, [0, 1, 2, 3], 2, 1)


# -- observation-window voting -------------------------------------------------


def _vote_rows(rng, positions, n_rows):
    rows = []
    for _ in range(n_rows):
        probs = rng.random(len(positions))
        probs = probs / probs.sum()
        rows.append((list(positions), probs.tolist()))
    return rows


def _oracle_snapkv(rows, positions, w, kernel, budget):
    order = sorted(positions)
    index = {p: i for i, p in enumerate(order)}
    votes = [0.0] * len(order)
    for row_positions, row in rows:  # same accumulation order as production
        for p, v in zip(row_positions, row):
            votes[index[p]] += v
    pooled = _oracle_pool(votes, kernel)
    return _oracle_windowed_select(pooled, order, w, budget)


def test_snapkv_decide_matches_oracle_randomized():
    rng = np.random.default_rng(5)
    for _ in range(300):
        w = int(rng.integers(1, 6))
        budget = int(rng.integers(w + 1, w + 16))
        n = int(rng.integers(budget + 1, budget + 24))
        positions = sorted(rng.choice(128, size=n, replace=False).tolist())
        rows = _vote_rows(rng, positions, int(rng.integers(1, w + 1)))
        kernel = int(rng.choice([1, 3, 5]))
        got = snapkvd_decide(rows, positions, w, kernel, budget)
        assert got == _oracle_snapkv(rows, positions, w, kernel, budget)
        assert len(got) == budget


def test_snapkv_prefill_matches_oracle_and_flags():
    rng = np.random.default_rng(6)
    w, kernel, budget = 4, 3, 10
    positions = list(range(30))
    rows = _vote_rows(rng, positions, w)
    retained, passthrough = snapkv_prefill(rows, positions, w, kernel, budget)
    assert not passthrough
    assert retained == _oracle_snapkv(rows, positions, w, kernel, budget)
    short, passthrough = snapkv_prefill([], list(range(3)), w, kernel, budget)
    assert passthrough and short == [0, 1, 2]
    mid, passthrough = snapkv_prefill(rows[:1], list(range(7)), w, kernel, budget)
    assert not passthrough and mid == list(range(7))


def test_snapkv_window_always_survives():
    rng = np.random.default_rng(7)
    positions = list(range(40))
    rows = _vote_rows(rng, positions, 4)
    retained = snapkvd_decide(rows, positions, 4, 3, 12)
    assert set(range(36, 40)) <= set(retained)


def test_snapkv_pooling_spreads_votes_to_neighbours():
    # one spike at position 5; kernel 3 lifts 4 and 6 above the rest
    positions = list(range(12))
    rows = [(positions, [0.0] * 5 + [1.0] + [0.0] * 6)]
    retained = snapkvd_decide(rows, positions, 2, 3, 5)
    assert retained == [4, 5, 6, 10, 11]


def test_snapkv_contract_errors():
    with pytest.raises(ConfigError):
        snapkvd_decide([], list(range(8)), 4, 3, 4)  # budget must exceed window
    with pytest.raises(ConfigError):
        snapkv_prefill([], list(range(8)), 4, 3, 3)
    with pytest.raises(EngineError):
        snapkvd_decide([([99], [1.0])], list(range(8)), 2, 3, 6)


# -- importance/redundancy mix -------------------------------------------------


def _oracle_rkv(accum, keys, positions, alpha, budget, w):
    order = sorted(range(len(positions)), key=lambda i: positions[i])
    pos = [positions[i] for i in order]
    scores = np.asarray([accum[i] for i in order], dtype=np.float64)
    kmat = np.asarray([keys[i] for i in order], dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    normalized = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    redundancy = _pairwise_max_cosine(kmat)  # shared routine; selection is oracled
    combined = (alpha * normalized - (1.0 - alpha) * redundancy).tolist()
    return _oracle_windowed_select(combined[: len(pos) - w] + [np.inf] * w, pos, w, budget)


def test_rkv_decide_matches_oracle_randomized():
    rng = np.random.default_rng(8)
    for _ in range(300):
        w = int(rng.integers(1, 5))
        budget = int(rng.integers(w + 1, w + 12))
        n = int(rng.integers(budget + 1, budget + 16))
        positions = sorted(rng.choice(64, size=n, replace=False).tolist())
        accum = rng.random(n).tolist()
        keys = rng.normal(size=(n, 6))
        alpha = float(rng.choice([0.0, 0.3, 0.5, 1.0]))
        got = rkv_decide(accum, keys, positions, alpha, budget, w)
        assert got == _oracle_rkv(accum, keys, positions, alpha, budget, w)
        assert len(got) == budget


def test_rkv_alpha_one_ignores_redundancy():
    positions = list(range(6))
    accum = [0.9, 0.1, 0.8, 0.2, 0.0, 0.0]
    keys = np.ones((6, 4))  # maximal redundancy everywhere
    got = rkv_decide(accum, keys, positions, 1.0, 4, 2)
    assert got == [0, 2, 4, 5]


def test_rkv_alpha_zero_prefers_distinct_keys():
    positions = list(range(5))
    accum = [0.0, 1.0, 1.0, 0.0, 0.0]
    keys = np.array(
        [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]
    )
    # rows 0 and 1 are duplicates (cosine 1); row 2 is orthogonal to them
    got = rkv_decide(accum, keys, positions, 0.0, 3, 2)
    assert got == [2, 3, 4]


def test_rkv_zero_norm_keys_have_zero_redundancy():
    keys = np.zeros((3, 4))
    assert _pairwise_max_cosine(keys).tolist() == [0.0, 0.0, 0.0]


def test_rkv_constant_scores_normalize_to_zero():
    positions = list(range(5))
    keys = np.eye(5)[:, :4]
    got = rkv_decide([0.7] * 5, keys, positions, 1.0, 4, 1)
    # all combined scores equal: ties keep the lowest positions
    assert got == [0, 1, 2, 4]


def test_rkv_contract_errors():
    with pytest.raises(ConfigError):
        rkv_decide([0.1], np.zeros((1, 2)), [0], 1.5, 4, 1)
    with pytest.raises(ConfigError):
        rkv_decide([0.1], np.zeros((1, 2)), [0], 0.5, 2, 2)
    with pytest.raises(EngineError):
        rkv_decide([0.1, 0.2], np.zeros((3, 2)), [0, 1, 2], 0.5, 2, 1)
    assert rkv_decide([0.1, 0.2], np.zeros((2, 4)), [1, 0], 0.5, 3, 1) == [0, 1]
