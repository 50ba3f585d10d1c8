"""Eviction of the largest-key-norm entry; small norms attract attention."""

from __future__ import annotations

from ..errors import ConfigError, EngineError
from .base import OVERFLOW, EvictionPolicy


def knorm_evict(key_norms, positions, budget: int, protected_recent: int) -> list[int]:
    """Drop the unprotected position with the largest key L2 norm (tie: oldest)."""
    if protected_recent < 0:
        raise ConfigError(f"protected_recent must be >= 0, got {protected_recent}")
    if protected_recent >= budget:
        raise ConfigError(
            f"protected_recent {protected_recent} must be below budget {budget}"
        )
    positions = [int(p) for p in positions]
    norms = [float(v) for v in key_norms]
    if len(norms) != len(positions):
        raise EngineError("key_norms and positions length mismatch")
    n = len(positions)
    if n <= budget:
        return sorted(positions)
    if n != budget + 1:
        raise EngineError(f"one-in-one-out violated: {n} positions for budget {budget}")
    order = sorted(range(n), key=lambda i: positions[i])
    protected = set(order[n - protected_recent :]) if protected_recent else set()
    evict_idx = None
    for i in order:  # ascending positions, so the first maximum is the oldest
        if i in protected:
            continue
        if evict_idx is None or norms[i] > norms[evict_idx]:
            evict_idx = i
    return sorted(positions[i] for i in range(n) if i != evict_idx)


class KNormPolicy(EvictionPolicy):
    name = "knorm"
    cadence = OVERFLOW

    def __init__(self, protected_recent: int = 2) -> None:
        super().__init__()
        if protected_recent < 0:
            raise ConfigError(f"protected_recent must be >= 0, got {protected_recent}")
        self.protected_recent = protected_recent
        self._norms: dict = {}

    def min_budget(self) -> int:
        return self.protected_recent + 1

    def _bound(self) -> None:
        self._norms = {}

    def observe_insert(self, layer, head, position, knorm, key=None) -> None:
        self._norms.setdefault((layer, head), {})[int(position)] = float(knorm)
        self._charge_mults(self.head_dim)

    def decide(self, layer, head, positions, keys) -> list[int]:
        norms_by_pos = self._norms.get((layer, head), {})
        norms = [norms_by_pos[int(p)] for p in positions]
        retained = knorm_evict(norms, positions, self.budgets[layer], self.protected_recent)
        candidates = len(positions) - self.protected_recent
        self._charge_comparisons(max(candidates - 1, 0))
        return retained

    def compact(self, layer, head, retained) -> None:
        state = self._norms.get((layer, head), {})
        keep = set(int(p) for p in retained)
        for p in [p for p in state if p not in keep]:
            del state[p]
