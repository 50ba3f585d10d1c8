"""Importance/redundancy mix: accumulated attention vs key similarity."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, EngineError
from .base import WINDOW, EvictionPolicy, topk_comparison_charge
from .h2o import h2o_update
from .selection import top_k_positions


def _pairwise_max_cosine(keys: np.ndarray) -> np.ndarray:
    """Per row: max cosine similarity to any other row (zero-norm rows -> 0)."""
    norms = np.linalg.norm(keys, axis=1)
    unit = np.zeros_like(keys)
    nonzero = norms > 0.0
    unit[nonzero] = keys[nonzero] / norms[nonzero, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    out = sims.max(axis=1)
    out[out == -np.inf] = 0.0  # single-row degenerate case
    return out


def rkv_decide(accum_scores, keys, positions, alpha: float, budget: int, w: int) -> list[int]:
    """Keep the w newest positions plus the top (budget - w) by combined score.

    combined = alpha * minmax(accum_scores) - (1 - alpha) * redundancy, where
    redundancy is the max pairwise key cosine over the current entries.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if budget <= w:
        raise ConfigError(f"budget {budget} must exceed the window {w}")
    positions = [int(p) for p in positions]
    n = len(positions)
    if n <= budget:
        return sorted(positions)
    scores = np.asarray(accum_scores, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if scores.size != n or keys.shape[0] != n:
        raise EngineError("accum_scores/keys must align with positions")
    order = np.argsort(np.asarray(positions, dtype=np.int64), kind="stable")
    sorted_positions = [positions[i] for i in order]
    scores = scores[order]
    keys = keys[order]
    lo, hi = scores.min(), scores.max()
    normalized = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    redundancy = _pairwise_max_cosine(keys)
    combined = alpha * normalized - (1.0 - alpha) * redundancy
    split = n - w
    kept = top_k_positions(combined[:split], sorted_positions[:split], budget - w)
    return sorted(kept + sorted_positions[split:])


class RKVPolicy(EvictionPolicy):
    name = "rkv"
    cadence = WINDOW
    needs_keys = True

    def __init__(
        self,
        window: int = 8,
        buffer_interval: int = 128,
        kernel: int = 5,
        alpha: float = 0.5,
    ) -> None:
        # kernel is accepted for parameter parity but unused: this decision
        # rule scores positions directly, without pooled voting
        super().__init__()
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        if buffer_interval < 1:
            raise ConfigError(f"buffer_interval must be >= 1, got {buffer_interval}")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
        self.window = window
        self.buffer_interval = buffer_interval
        self.kernel = kernel
        self.alpha = alpha
        self.interval = buffer_interval
        self._scores: dict = {}

    def min_budget(self) -> int:
        return self.window + 1

    def _bound(self) -> None:
        self._scores = {}

    def _state(self, layer, head) -> dict:
        return self._scores.setdefault((layer, head), {})

    def observe_row(self, layer, head, positions, row) -> None:
        h2o_update(self._state(layer, head), positions, row)

    def _decide(self, layer, head, positions, keys) -> list[int]:
        if keys is None:
            raise EngineError("rkv decisions require key vectors")
        state = self._state(layer, head)
        accum = [state.get(int(p), (0.0, 0))[0] for p in positions]
        retained = rkv_decide(
            accum, keys, positions, self.alpha, self.budgets[layer], self.window
        )
        if len(retained) < len(positions):
            m = len(positions)
            self._charge_mults(m * m * self.head_dim + m * self.head_dim)
            self._charge_comparisons(topk_comparison_charge(m - self.window))
        return retained

    def prefill_decision(self, layer, head, positions, keys):
        return self._decide(layer, head, positions, keys)

    def decide(self, layer, head, positions, keys) -> list[int]:
        return self._decide(layer, head, positions, keys)

    def compact(self, layer, head, retained) -> None:
        state = self._state(layer, head)
        keep = set(int(p) for p in retained)
        for p in [p for p in state if p not in keep]:
            del state[p]
