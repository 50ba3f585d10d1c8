"""Attention sinks plus a sliding window of recent tokens."""

from __future__ import annotations

from ..errors import ConfigError
from .base import OVERFLOW, EvictionPolicy


def streaming_llm_retain(current_positions, sink_size: int, budget: int) -> list[int]:
    """Keep the sink_size oldest positions and fill the rest with the newest.

    Score-free: the result depends only on the positions present.
    """
    if sink_size < 0:
        raise ConfigError(f"sink_size must be >= 0, got {sink_size}")
    if budget <= sink_size:
        raise ConfigError(f"budget {budget} must exceed sink_size {sink_size}")
    positions = sorted(int(p) for p in current_positions)
    if len(positions) <= budget:
        return positions
    return positions[:sink_size] + positions[len(positions) - (budget - sink_size) :]


class StreamingLLMPolicy(EvictionPolicy):
    name = "streaming_llm"
    cadence = OVERFLOW

    def __init__(self, sink_size: int = 4) -> None:
        super().__init__()
        if sink_size < 0:
            raise ConfigError(f"sink_size must be >= 0, got {sink_size}")
        self.sink_size = sink_size

    def min_budget(self) -> int:
        return self.sink_size + 1

    def observe_row(self, layer, head, positions, row) -> None:
        # constant bookkeeping per step: one budget comparison
        self._charge_comparisons(1)

    def decide(self, layer, head, positions, keys) -> list[int]:
        return streaming_llm_retain(positions, self.sink_size, self.budgets[layer])
