"""Policy interface and the cadence driver shared by engine and replay.

A policy observes the attention row and new key for every processed token,
then, when its cadence fires, returns the set of positions to keep for one
(layer, head). The driver owns the cadence so that live generation and
offline trace replay make decisions through the exact same code path.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, EngineError

OVERFLOW = "overflow"  # invoked whenever a head exceeds its budget
WINDOW = "window"  # invoked every `interval` decode steps, plus prefill end
NEVER = "never"


def restrict_row(row_positions, row_probs, keep_positions) -> tuple[np.ndarray, np.ndarray]:
    """Project a probability row onto the kept positions and renormalize.

    When the kept set covers the whole row the inputs are returned
    unchanged, so a row that needs no projection is preserved bit-exactly.
    """
    row_positions = np.asarray(row_positions, dtype=np.int64)
    row_probs = np.asarray(row_probs, dtype=np.float64)
    keep = set(int(p) for p in keep_positions)
    mask = np.fromiter((int(p) in keep for p in row_positions), dtype=bool, count=row_positions.size)
    if mask.all():
        return row_positions, row_probs
    kept_positions = row_positions[mask]
    kept = row_probs[mask]
    total = kept.sum()
    if total <= 0.0:
        # all surviving entries underflowed to zero mass; fall back to uniform
        kept = np.full(kept.shape, 1.0 / max(kept.size, 1))
    else:
        kept = kept / total
    return kept_positions, kept


def topk_comparison_charge(candidates: int) -> int:
    """Comparison count charged for one top-k selection over n candidates."""
    if candidates <= 0:
        return 0
    return candidates * math.ceil(math.log2(max(candidates, 2)))


class EvictionPolicy:
    """Base class; subclasses implement observation and decision hooks."""

    name = "abstract"
    cadence = OVERFLOW
    interval: int | None = None  # decode steps between WINDOW invocations
    needs_keys = False  # decide() requires raw key vectors

    def __init__(self) -> None:
        self.num_layers = 0
        self.num_heads = 0
        self.head_dim = 0
        self.budgets: list[int] | None = None
        self.counters = None

    def min_budget(self) -> int:
        return 1

    def bind(self, num_layers: int, num_heads: int, head_dim: int, budgets, counters) -> None:
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.counters = counters
        if budgets is not None:
            budgets = [int(b) for b in budgets]
            if len(budgets) != num_layers:
                raise ConfigError(
                    f"got {len(budgets)} per-layer budgets for {num_layers} layers"
                )
            floor = self.min_budget()
            for layer, b in enumerate(budgets):
                if b < floor:
                    raise ConfigError(
                        f"budget {b} at layer {layer} is below the {self.name} minimum {floor}"
                    )
        elif self.cadence != NEVER:
            raise ConfigError(f"policy {self.name} requires a budget")
        self.budgets = budgets
        self._bound()

    def _bound(self) -> None:
        pass

    # -- per-step observations ---------------------------------------------

    def observe_insert(self, layer, head, position, knorm, key=None) -> None:
        pass

    def observe_row(self, layer, head, positions, row) -> None:
        pass

    # -- decisions -----------------------------------------------------------

    def prefill_decision(self, layer, head, positions, keys):
        """WINDOW policies compact the prompt here; None means no change."""
        return None

    def decide(self, layer, head, positions, keys) -> list[int]:
        raise NotImplementedError

    def compact(self, layer, head, retained) -> None:
        """Drop per-position state for evicted entries."""

    # -- charging -------------------------------------------------------------

    def _charge_mults(self, n: int) -> None:
        if self.counters is not None:
            self.counters.add_mults(n)

    def _charge_comparisons(self, n: int) -> None:
        if self.counters is not None:
            self.counters.add_comparisons(n)


class FullPolicy(EvictionPolicy):
    """Keeps everything; the baseline all other policies are compared to."""

    name = "full"
    cadence = NEVER

    def decide(self, layer, head, positions, keys) -> list[int]:
        return [int(p) for p in positions]


class PolicyDriver:
    """Applies a policy's cadence over the heads of a cache-like object.

    The cache-like object must provide iter_heads() yielding
    (layer, head, head_state) where head_state has positions() and keys().
    The driver returns decisions; the caller applies them to its own
    storage and reports them back via a single apply callback.
    """

    def __init__(self, policy: EvictionPolicy, num_layers, num_heads, head_dim, budgets, counters):
        policy.bind(num_layers, num_heads, head_dim, budgets, counters)
        self.policy = policy
        self.budgets = budgets
        self.counters = counters
        self.decode_steps = 0
        self._since_invocation = 0

    def _invoke(self, layer, head, head_state) -> list[int]:
        positions = head_state.positions()
        keys = head_state.keys() if self.policy.needs_keys else None
        if self.counters is not None:
            self.counters.add_invocations(1)
        retained = self.policy.decide(layer, head, positions, keys)
        budget = self.budgets[layer]
        if len(retained) > budget:
            raise EngineError(
                f"{self.policy.name} retained {len(retained)} > budget {budget} "
                f"at layer {layer} head {head}"
            )
        self.policy.compact(layer, head, retained)
        return retained

    def _invoke_all(self, cache_like) -> dict:
        return {
            (layer, head): self._invoke(layer, head, hs)
            for layer, head, hs in cache_like.iter_heads()
        }

    def after_step(self, phase: str, cache_like) -> dict | None:
        """Cadence hook after each processed token. Returns decisions or None."""
        cadence = self.policy.cadence
        if cadence == NEVER:
            return None
        if cadence == OVERFLOW:
            decisions = {}
            for layer, head, hs in cache_like.iter_heads():
                if hs.positions().size > self.budgets[layer]:
                    decisions[(layer, head)] = self._invoke(layer, head, hs)
            return decisions or None
        if phase == "decode":
            self.decode_steps += 1
            self._since_invocation += 1
            if self._since_invocation >= self.policy.interval:
                self._since_invocation = 0
                return self._invoke_all(cache_like)
        return None

    def at_prefill_end(self, cache_like) -> dict | None:
        """Prompt compaction point for WINDOW policies."""
        if self.policy.cadence != WINDOW:
            return None
        self._since_invocation = 0
        decisions = {}
        for layer, head, hs in cache_like.iter_heads():
            positions = hs.positions()
            keys = hs.keys() if self.policy.needs_keys else None
            if self.counters is not None:
                self.counters.add_invocations(1)
            retained = self.policy.prefill_decision(layer, head, positions, keys)
            if retained is None:
                continue
            if len(retained) > self.budgets[layer]:
                raise EngineError(
                    f"{self.policy.name} prefill kept {len(retained)} > budget "
                    f"{self.budgets[layer]} at layer {layer} head {head}"
                )
            self.policy.compact(layer, head, retained)
            decisions[(layer, head)] = retained
        return decisions or None

    def at_generation_end(self, cache_like) -> dict | None:
        """Final partial-window invocation for WINDOW policies."""
        if self.policy.cadence != WINDOW or self._since_invocation == 0:
            return None
        self._since_invocation = 0
        return self._invoke_all(cache_like)

    def relaxed_bound(self, layer: int) -> int | None:
        """Largest admissible head size between invocations, None if unbounded."""
        if self.budgets is None:
            return None
        if self.policy.cadence == OVERFLOW:
            return self.budgets[layer]
        if self.policy.cadence == WINDOW:
            return self.budgets[layer] + self.policy.interval
        return None
