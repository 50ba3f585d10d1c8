"""Observation-window voting with max-pool smoothing (prompt and decode)."""

from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import ConfigError, EngineError
from .base import WINDOW, EvictionPolicy, topk_comparison_charge
from .selection import max_pool_1d, top_k_positions


def _vote(rows, positions) -> np.ndarray:
    """Sum attention mass per position over the observation rows.

    rows: sequence of (row_positions, row_probs); every row position must
    still be present in `positions` (no eviction happens inside a window).
    """
    index = {int(p): i for i, p in enumerate(positions)}
    votes = np.zeros(len(index), dtype=np.float64)
    for row_positions, row_probs in rows:
        for p, v in zip(row_positions, row_probs):
            i = index.get(int(p))
            if i is None:
                raise EngineError(f"observation row refers to evicted position {int(p)}")
            votes[i] += float(v)
    return votes


def _window_vote_retain(rows, positions, w, kernel, budget) -> list[int]:
    order = sorted(int(p) for p in positions)
    votes = _vote(rows, order)
    # pooling runs over the whole vote vector so window votes smooth into
    # neighbouring older positions; selection then happens among the older ones
    pooled = max_pool_1d(votes, kernel)
    split = len(order) - w
    kept = top_k_positions(pooled[:split], order[:split], budget - w)
    return sorted(kept + order[split:])


def snapkv_prefill(prompt_attn, positions, w: int, kernel: int, budget: int):
    """Compact the prompt: keep the observation window plus top-voted positions.

    Returns (retained, passthrough); passthrough is True when the prompt is
    no longer than the window, in which case nothing is compressed.
    """
    if budget < w:
        raise ConfigError(f"budget {budget} must be at least the window {w}")
    positions = sorted(int(p) for p in positions)
    if len(positions) <= w:
        return positions, True
    if len(positions) <= budget:
        return positions, False
    return _window_vote_retain(prompt_attn, positions, w, kernel, budget), False


def snapkvd_decide(score_window, positions, w: int, kernel: int, budget: int) -> list[int]:
    """Periodic decode-time compaction using the last w query rows."""
    if budget <= w:
        raise ConfigError(f"budget {budget} must exceed the window {w}")
    positions = sorted(int(p) for p in positions)
    if len(positions) <= budget:
        return positions
    return _window_vote_retain(score_window, positions, w, kernel, budget)


class SnapKVDPolicy(EvictionPolicy):
    name = "snapkv_d"
    cadence = WINDOW

    def __init__(self, window: int = 128, kernel: int = 5) -> None:
        super().__init__()
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {kernel}")
        self.window = window
        self.kernel = kernel
        self.interval = window
        self.prefill_passthrough = False
        self._rows: dict = {}

    def min_budget(self) -> int:
        return self.window + 1

    def _bound(self) -> None:
        self._rows = {}
        self.prefill_passthrough = False

    def _row_buffer(self, layer, head) -> deque:
        key = (layer, head)
        buf = self._rows.get(key)
        if buf is None:
            buf = deque(maxlen=self.window)
            self._rows[key] = buf
        return buf

    def observe_row(self, layer, head, positions, row) -> None:
        self._row_buffer(layer, head).append((positions, row))

    def _charge_decision(self, size: int) -> None:
        self._charge_mults(size * self.head_dim)
        self._charge_comparisons(topk_comparison_charge(size - self.window))

    def prefill_decision(self, layer, head, positions, keys):
        buf = self._row_buffer(layer, head)
        retained, passthrough = snapkv_prefill(
            list(buf), positions, self.window, self.kernel, self.budgets[layer]
        )
        buf.clear()
        if passthrough:
            self.prefill_passthrough = True
        elif len(retained) < positions.size:
            self._charge_decision(positions.size)
        return retained

    def decide(self, layer, head, positions, keys) -> list[int]:
        buf = self._row_buffer(layer, head)
        retained = snapkvd_decide(
            list(buf), positions, self.window, self.kernel, self.budgets[layer]
        )
        buf.clear()
        if len(retained) < positions.size:
            self._charge_decision(positions.size)
        return retained
