"""Comparison metrics: attention loss, output deviation, retention, op counts.

Wall-clock throughput helpers are included for reporting, but every tested
claim about policy overhead is made on deterministic op counters instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EngineError
from .model import DecoderModel, mlp_block

_ROW_SUM_TOL = 1e-9


def attention_loss_step(full_positions, full_row, retained_positions, retained_row) -> float:
    """Sum over all positions of |full(p) - evicted(p)|, treating evicted
    positions as zero mass. Bounded by 2 for two probability rows."""
    full_positions = np.asarray(full_positions, dtype=np.int64)
    full_row = np.asarray(full_row, dtype=np.float64)
    retained_positions = np.asarray(retained_positions, dtype=np.int64)
    retained_row = np.asarray(retained_row, dtype=np.float64)
    if full_positions.size != full_row.size or retained_positions.size != retained_row.size:
        raise EngineError("row and position lengths do not match")
    for name, row in (("full", full_row), ("retained", retained_row)):
        if row.size and abs(float(row.sum()) - 1.0) > _ROW_SUM_TOL:
            raise EngineError(f"{name} row does not sum to 1 (got {float(row.sum())})")
    lookup = {int(p): float(v) for p, v in zip(retained_positions, retained_row)}
    if len(lookup) != retained_positions.size:
        raise EngineError("retained positions contain duplicates")
    loss = 0.0
    covered = 0
    for p, v in zip(full_positions, full_row):
        r = lookup.get(int(p))
        if r is None:
            loss += abs(float(v))
        else:
            loss += abs(float(v) - r)
            covered += 1
    if covered != retained_positions.size:
        raise EngineError("retained positions are not a subset of the full row")
    return loss


def output_deviation(model: DecoderModel, layer: int, x, x_bar) -> float:
    """L2 distance of the layer MLP outputs for full vs evicted attention."""
    x = np.asarray(x, dtype=np.float64)
    x_bar = np.asarray(x_bar, dtype=np.float64)
    return float(np.linalg.norm(mlp_block(x, model, layer) - mlp_block(x_bar, model, layer)))


def critical_retention(critical, retained_at_end, sequence_length=None):
    """Fraction of critical positions still cached at the end; None if no
    critical positions were supplied."""
    critical = set(int(p) for p in critical)
    if not critical:
        return None
    if sequence_length is not None:
        bad = [p for p in critical if p < 0 or p >= sequence_length]
        if bad:
            raise ConfigError(f"critical positions {sorted(bad)} outside sequence of length {sequence_length}")
    retained = set(int(p) for p in retained_at_end)
    return len(critical & retained) / len(critical)


def throughput(tokens_emitted: int, wall_seconds: float):
    """Tokens per second; None when undefined (no tokens or no elapsed time)."""
    if tokens_emitted <= 0 or wall_seconds <= 0.0:
        return None
    return tokens_emitted / wall_seconds


def latency_per_token(tokens_emitted: int, wall_seconds: float):
    """Milliseconds per emitted token; None when undefined."""
    if tokens_emitted <= 0 or wall_seconds < 0.0:
        return None
    return wall_seconds * 1000.0 / tokens_emitted


# -- op-count accounting ----------------------------------------------------


@dataclass
class Counts:
    mults: int = 0
    comparisons: int = 0
    invocations: int = 0

    def as_dict(self) -> dict:
        return {
            "mults": self.mults,
            "comparisons": self.comparisons,
            "invocations": self.invocations,
        }


class OpCounters:
    """Phase-aware counters the policies charge their bookkeeping work to."""

    def __init__(self) -> None:
        self.phase = "prefill"
        self._counts = {"prefill": Counts(), "decode": Counts()}

    def _current(self) -> Counts:
        return self._counts[self.phase]

    def add_mults(self, n: int) -> None:
        self._current().mults += int(n)

    def add_comparisons(self, n: int) -> None:
        self._current().comparisons += int(n)

    def add_invocations(self, n: int = 1) -> None:
        self._current().invocations += int(n)

    def counts(self, phase: str) -> Counts:
        return self._counts[phase]

    def snapshot(self) -> dict:
        out = {phase: c.as_dict() for phase, c in self._counts.items()}
        out["total"] = {
            key: out["prefill"][key] + out["decode"][key] for key in out["prefill"]
        }
        return out


def _log_charge(candidates: int) -> int:
    if candidates <= 0:
        return 0
    return candidates * math.ceil(math.log2(max(candidates, 2)))


def opcount_model(
    policy: str,
    N: int,
    B: int,
    d: int,
    w: int | None = None,
    *,
    num_layers: int = 1,
    num_heads: int = 1,
    recency_window: int | None = None,
    protected_recent: int = 2,
    rkv_window: int = 8,
) -> dict:
    """Predicted decode-phase counter totals for N decoded tokens.

    Assumes the steady state where the prompt filled the budget, so every
    decode step starts from a full cache. `w` is the invocation interval
    for the windowed policies (observation window or buffer interval).
    Charging constants per policy:
      streaming_llm: 1 comparison per step, nothing else
      h2o:           (B+1)*d multiplies per step; B - recency_window
                     comparisons per eviction; one eviction per step
      knorm:         d multiplies per inserted key; B - protected_recent
                     comparisons per eviction; one eviction per step
      snapkv_d:      m*d multiplies and (m-w)*ceil(log2(m-w)) comparisons
                     per invocation, where m is the cache size seen
      rkv:           (m^2 + m)*d multiplies and (m - rkv_window) log-charged
                     comparisons per invocation
    """
    if N < 0 or B < 1 or d < 1:
        raise ConfigError("N must be >= 0 and B, d >= 1")
    heads = num_layers * num_heads
    if policy == "full":
        mults = comparisons = invocations = 0
    elif policy == "streaming_llm":
        mults = 0
        comparisons = N
        invocations = N
    elif policy == "h2o":
        window = recency_window if recency_window is not None else B // 2
        mults = N * (B + 1) * d
        comparisons = N * (B - window)
        invocations = N
    elif policy == "knorm":
        mults = N * d
        comparisons = N * (B - protected_recent)
        invocations = N
    elif policy in ("snapkv_d", "rkv"):
        if w is None or w < 1:
            raise ConfigError(f"{policy} prediction requires the interval w")
        full_windows, partial = divmod(N, w)
        sizes = [B + w] * full_windows + ([B + partial] if partial else [])
        invocations = len(sizes)
        if policy == "snapkv_d":
            mults = sum(m * d for m in sizes)
            comparisons = sum(_log_charge(m - w) for m in sizes)
        else:
            mults = sum((m * m + m) * d for m in sizes)
            comparisons = sum(_log_charge(m - rkv_window) for m in sizes)
    else:
        raise ConfigError(f"unknown policy {policy!r}")
    return {
        "mults": mults * heads,
        "comparisons": comparisons * heads,
        "invocations": invocations * heads,
    }


# -- per-run collection -------------------------------------------------------


@dataclass
class MetricsSummary:
    attention_loss_map: list  # num_layers x num_heads raw sums
    attention_loss_total: float
    loss_steps: int
    deviation_per_step: list
    deviation_mean: float
    deviation_max: float

    def as_dict(self) -> dict:
        return {
            "attention_loss_map": self.attention_loss_map,
            "attention_loss_total": self.attention_loss_total,
            "loss_steps": self.loss_steps,
            "deviation_per_step": self.deviation_per_step,
            "deviation_mean": self.deviation_mean,
            "deviation_max": self.deviation_max,
        }


class MetricsCollector:
    """Accumulates attention loss per (layer, head) and deviation per step."""

    def __init__(self, num_layers: int, num_heads: int) -> None:
        self.loss_map = np.zeros((num_layers, num_heads), dtype=np.float64)
        self.loss_steps = 0
        self.deviations: list[float] = []

    def add_attention_loss(self, layer: int, head: int, loss: float) -> None:
        self.loss_map[layer, head] += loss

    def finish_step(self, layer_deviations) -> None:
        self.loss_steps += 1
        if layer_deviations:
            self.deviations.append(float(np.mean(layer_deviations)))

    def summary(self) -> MetricsSummary:
        deviations = self.deviations
        return MetricsSummary(
            attention_loss_map=self.loss_map.tolist(),
            attention_loss_total=float(self.loss_map.sum()),
            loss_steps=self.loss_steps,
            deviation_per_step=list(deviations),
            deviation_mean=float(np.mean(deviations)) if deviations else 0.0,
            deviation_max=float(np.max(deviations)) if deviations else 0.0,
        )
