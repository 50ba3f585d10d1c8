"""Selection and pooling primitives shared by the eviction policies."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def top_k_positions(values, positions, k: int, *, prefer_low_position: bool = True) -> list[int]:
    """Positions of the k largest values, via partial selection.

    Boundary ties are resolved by position (lowest first by default), so
    the result is deterministic and matches the sort-based oracle exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if values.shape != positions.shape:
        raise ConfigError("values and positions must have equal length")
    n = values.shape[0]
    if k <= 0:
        return []
    if k >= n:
        return sorted(int(p) for p in positions)
    part = np.argpartition(-values, k - 1)[:k]
    threshold = values[part].min()
    # everything strictly above the k-th value is in; ties at the boundary
    # are filled by position order
    above = positions[values > threshold]
    tied = np.sort(positions[values == threshold])
    if not prefer_low_position:
        tied = tied[::-1]
    need = k - above.size
    chosen = np.concatenate([above, tied[:need]])
    return sorted(int(p) for p in chosen)


def oracle_topk(values, positions, protected, k: int, tie_rule: str = "low_position") -> set[int]:
    """Exhaustive top-k reference selector (full sort). Test oracle."""
    if tie_rule not in ("low_position", "high_position"):
        raise ConfigError(f"unknown tie rule {tie_rule!r}")
    protected = set(int(p) for p in protected)
    candidates = [
        (float(v), int(p)) for v, p in zip(values, positions) if int(p) not in protected
    ]
    if k > len(candidates):
        raise ConfigError(f"k={k} exceeds {len(candidates)} unprotected candidates")
    if tie_rule == "low_position":
        candidates.sort(key=lambda vp: (-vp[0], vp[1]))
    else:
        candidates.sort(key=lambda vp: (-vp[0], -vp[1]))
    return {p for _, p in candidates[:k]}


def max_pool_1d(x, kernel: int) -> np.ndarray:
    """Stride-1 max pool; windows are clipped at the edges.

    Clipping is equivalent to same-padding by edge replication for a max
    pool, since replicated boundary values never exceed the clipped max.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"pooling kernel must be odd and >= 1, got {kernel}")
    x = np.asarray(x, dtype=np.float64)
    half = kernel // 2
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = x[max(0, i - half) : i + half + 1].max()
    return out
