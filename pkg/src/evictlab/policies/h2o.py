"""Heavy-hitter eviction driven by accumulated attention mass."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, EngineError
from .base import OVERFLOW, EvictionPolicy


def h2o_update(score_state: dict, positions, row) -> dict:
    """Add one attention row into the running per-position score sums.

    score_state maps position -> (score_sum, observation_count) and is
    mutated in place; the count supports the optional averaged variant.
    """
    positions = list(positions)
    row = np.asarray(row, dtype=np.float64)
    if len(positions) != row.size:
        raise EngineError(f"row length {row.size} does not match {len(positions)} positions")
    if row.size and float(row.sum()) == 0.0:
        raise EngineError("all-zero attention row cannot update heavy-hitter scores")
    for p, v in zip(positions, row):
        p = int(p)
        score, count = score_state.get(p, (0.0, 0))
        score_state[p] = (score + float(v), count + 1)
    return score_state


def h2o_evict(scores, positions, recency_window: int, budget: int) -> list[int]:
    """Drop the unprotected position with the lowest score (tie: oldest)."""
    if recency_window < 0:
        raise ConfigError(f"recency_window must be >= 0, got {recency_window}")
    if recency_window >= budget:
        raise ConfigError(f"recency_window {recency_window} must be below budget {budget}")
    positions = [int(p) for p in positions]
    scores = [float(s) for s in scores]
    if len(scores) != len(positions):
        raise EngineError("scores and positions length mismatch")
    n = len(positions)
    if n <= budget:
        return sorted(positions)
    if n != budget + 1:
        raise EngineError(f"one-in-one-out violated: {n} positions for budget {budget}")
    order = sorted(range(n), key=lambda i: positions[i])
    protected = set(order[n - recency_window :]) if recency_window else set()
    evict_idx = None
    for i in order:
        if i in protected:
            continue
        if evict_idx is None or scores[i] < scores[evict_idx]:
            evict_idx = i
    return sorted(positions[i] for i in range(n) if i != evict_idx)


class H2OPolicy(EvictionPolicy):
    name = "h2o"
    cadence = OVERFLOW

    def __init__(self, recency_window: int | None = None, averaged: bool = False) -> None:
        # recency_window defaults to half the per-layer budget at bind time;
        # averaged divides sums by observation counts (variant, off by default)
        super().__init__()
        if recency_window is not None and recency_window < 0:
            raise ConfigError(f"recency_window must be >= 0, got {recency_window}")
        self.recency_window = recency_window
        self.averaged = bool(averaged)
        self._scores: dict = {}
        self._windows: list[int] = []

    def min_budget(self) -> int:
        if self.recency_window is None:
            return 1
        return self.recency_window + 1

    def _bound(self) -> None:
        self._scores = {}
        self._windows = [
            self.recency_window if self.recency_window is not None else b // 2
            for b in self.budgets
        ]

    def _state(self, layer, head) -> dict:
        return self._scores.setdefault((layer, head), {})

    def observe_row(self, layer, head, positions, row) -> None:
        h2o_update(self._state(layer, head), positions, row)
        self._charge_mults(len(row) * self.head_dim)

    def decide(self, layer, head, positions, keys) -> list[int]:
        state = self._state(layer, head)
        scores = []
        for p in positions:
            total, count = state.get(int(p), (0.0, 0))
            scores.append(total / count if self.averaged and count else total)
        window = self._windows[layer]
        retained = h2o_evict(scores, positions, window, self.budgets[layer])
        candidates = len(positions) - window
        self._charge_comparisons(max(candidates - 1, 0))
        return retained

    def compact(self, layer, head, retained) -> None:
        state = self._state(layer, head)
        keep = set(int(p) for p in retained)
        for p in [p for p in state if p not in keep]:
            del state[p]
