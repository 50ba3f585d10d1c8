"""Per-layer budget schedule: wide at the bottom, narrow at the top."""

from __future__ import annotations

import math

from ..errors import ConfigError


def pyramid_allocate(total_budget: int, num_layers: int, beta: float, window: int = 64) -> list[int]:
    """Linear per-layer budgets from b_max (layer 0) down to b_min, mean exactly B.

    b_min = max(window, floor(2B / (beta + 1))) and b_max = 2B - b_min, so the
    ideal schedule always sums to num_layers * B; integer rounding residue is
    assigned from layer 0 upward.
    """
    if num_layers < 1:
        raise ConfigError(f"num_layers must be >= 1, got {num_layers}")
    if beta < 1:
        raise ConfigError(f"beta must be >= 1, got {beta}")
    if total_budget < 1:
        raise ConfigError(f"budget must be >= 1, got {total_budget}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if num_layers == 1:
        return [total_budget]
    b_min = max(window, math.floor(2.0 * total_budget / (beta + 1.0)))
    if b_min > total_budget:
        raise ConfigError(
            f"pyramid floor {b_min} exceeds the per-layer budget {total_budget}; "
            f"lower the window or raise the budget"
        )
    b_max = 2 * total_budget - b_min
    ideal = [
        b_max + (b_min - b_max) * layer / (num_layers - 1) for layer in range(num_layers)
    ]
    budgets = [math.floor(v) for v in ideal]
    residue = num_layers * total_budget - sum(budgets)
    for layer in range(residue):
        budgets[layer] += 1
    return budgets
