"""Per-(layer, head) key/value cache with eviction support.

Every inserted entry is kept in backing storage even after eviction; the
live cache is an index into that storage. This makes three things cheap
and exact: the attention row over the live set, the counterfactual row
over everything ever inserted, and subset checks during compaction.
Backing storage grows with sequence length, which is acceptable at desk
scale and is what allows instrumentation to be lossless.
"""

from __future__ import annotations

import numpy as np

from .errors import EngineError

_INITIAL_CAPACITY = 64


class HeadCache:
    """Cache for one attention head. Positions are strictly increasing."""

    __slots__ = (
        "head_dim",
        "_keys",
        "_values",
        "_positions",
        "_count",
        "_live",
        "_pos_to_idx",
        "_live_arr",
    )

    def __init__(self, head_dim: int) -> None:
        self.head_dim = head_dim
        self._keys = np.empty((_INITIAL_CAPACITY, head_dim), dtype=np.float64)
        self._values = np.empty((_INITIAL_CAPACITY, head_dim), dtype=np.float64)
        self._positions = np.empty(_INITIAL_CAPACITY, dtype=np.int64)
        self._count = 0
        self._live: list[int] = []
        self._pos_to_idx: dict[int, int] = {}
        self._live_arr: np.ndarray | None = None

    # -- mutation ---------------------------------------------------------

    def insert(self, position: int, key: np.ndarray, value: np.ndarray) -> None:
        if self._count and position <= int(self._positions[self._count - 1]):
            raise EngineError(
                f"insert position {position} not after last position "
                f"{int(self._positions[self._count - 1])}"
            )
        if self._count == self._keys.shape[0]:
            self._grow()
        idx = self._count
        self._keys[idx] = key
        self._values[idx] = value
        self._positions[idx] = position
        self._count += 1
        self._live.append(idx)
        self._pos_to_idx[position] = idx
        self._live_arr = None

    def retain(self, positions) -> None:
        """Compact the live set down to `positions` (a subset of it)."""
        wanted = sorted(set(int(p) for p in positions))
        live_set = set(self._live)
        new_live: list[int] = []
        for pos in wanted:
            idx = self._pos_to_idx.get(pos)
            if idx is None or idx not in live_set:
                raise EngineError(f"cannot retain position {pos}: not in the live cache")
            new_live.append(idx)
        self._live = new_live
        self._live_arr = None

    def _grow(self) -> None:
        new_cap = self._keys.shape[0] * 2
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            grown = np.empty((new_cap, self.head_dim), dtype=np.float64)
            grown[: self._count] = old[: self._count]
            setattr(self, name, grown)
        grown_pos = np.empty(new_cap, dtype=np.int64)
        grown_pos[: self._count] = self._positions[: self._count]
        self._positions = grown_pos

    # -- live view --------------------------------------------------------

    def _live_indices(self) -> np.ndarray:
        if self._live_arr is None:
            self._live_arr = np.asarray(self._live, dtype=np.int64)
        return self._live_arr

    @property
    def size(self) -> int:
        return len(self._live)

    def positions(self) -> np.ndarray:
        return self._positions[self._live_indices()]

    def keys(self) -> np.ndarray:
        return self._keys[self._live_indices()]

    def values(self) -> np.ndarray:
        return self._values[self._live_indices()]

    def is_live(self, position: int) -> bool:
        idx = self._pos_to_idx.get(int(position))
        return idx is not None and idx in set(self._live)

    # -- full (never-evicted) view ---------------------------------------

    @property
    def total_inserted(self) -> int:
        return self._count

    def full_positions(self) -> np.ndarray:
        return self._positions[: self._count]

    def full_keys(self) -> np.ndarray:
        return self._keys[: self._count]

    def full_values(self) -> np.ndarray:
        return self._values[: self._count]


class KVCache:
    """Grid of HeadCaches for a whole model."""

    def __init__(self, num_layers: int, num_heads: int, head_dim: int) -> None:
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self._heads = [
            [HeadCache(head_dim) for _ in range(num_heads)] for _ in range(num_layers)
        ]

    def head(self, layer: int, head: int) -> HeadCache:
        return self._heads[layer][head]

    def iter_heads(self):
        for layer in range(self.num_layers):
            for head in range(self.num_heads):
                yield layer, head, self._heads[layer][head]

    def retained_union(self) -> set[int]:
        """Positions live in at least one (layer, head) cache."""
        union: set[int] = set()
        for _, _, head_cache in self.iter_heads():
            union.update(int(p) for p in head_cache.positions())
        return union

    def max_live_size(self) -> int:
        return max(hc.size for _, _, hc in self.iter_heads())
