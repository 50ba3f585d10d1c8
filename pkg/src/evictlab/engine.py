"""Autoregressive generation with policy-driven cache compaction.

Every processed token inserts K/V entries into each (layer, head) cache.
Attention for the forward pass runs over the live (retained) entries; a
counterfactual row over everything ever inserted is computed alongside it
for instrumentation. The policy observes the projection of that full row
onto the live set, which is mathematically the evicted softmax but is
computed the same way trace replay computes it, so live and replayed
decisions agree bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cache import KVCache
from .errors import ConfigError, EngineError
from .metrics import MetricsCollector, OpCounters, attention_loss_step, output_deviation
from .model import EOS_TOKEN_ID, DecoderModel, mlp_block, softmax_attention
from .policies import (
    NEVER,
    OVERFLOW,
    WINDOW,
    EvictionPolicy,
    PolicyDriver,
    make_policy,
    parse_policy,
    pyramid_allocate,
    restrict_row,
)


@dataclass
class HeadStepRecord:
    """Observable footprint of one head at one step, for sinks."""

    row_positions: np.ndarray  # alignment of `row` (live set before eviction)
    row: np.ndarray
    knorm: float
    retained: np.ndarray  # live positions after this step's cadence events
    full_positions: np.ndarray | None = None  # only when a sink asked for full rows
    full_row: np.ndarray | None = None
    key: np.ndarray | None = None


@dataclass
class StepRecord:
    step: int  # processed-token index, 0-based
    token: int
    position: int
    heads: dict  # (layer, head) -> HeadStepRecord


@dataclass
class GenerationState:
    policy: EvictionPolicy
    driver: PolicyDriver
    cache: KVCache
    counters: OpCounters
    budgets: list[int] | None
    collector: MetricsCollector | None
    sinks: tuple
    collect_timeline: bool
    prompt_len: int | None = None
    phase: str = "prefill"
    n_processed: int = 0
    timeline: list = field(default_factory=list)

    @property
    def want_full_rows(self) -> bool:
        return any(getattr(s, "full_rows", False) for s in self.sinks)


def start_generation(
    model: DecoderModel,
    policy_spec="full",
    budget: int | None = None,
    *,
    prompt_len: int | None = None,
    sinks=(),
    collect_timeline: bool = True,
    compute_metrics: bool = True,
) -> GenerationState:
    """Build a generation session: cache, policy, driver, instrumentation."""
    cfg = model.config
    spec = parse_policy(policy_spec)
    policy = make_policy(spec)
    budgets = resolve_budgets(spec, budget, cfg.num_layers)
    counters = OpCounters()
    driver = PolicyDriver(
        policy, cfg.num_layers, cfg.num_heads, cfg.head_dim, budgets, counters
    )
    collector = MetricsCollector(cfg.num_layers, cfg.num_heads) if compute_metrics else None
    return GenerationState(
        policy=policy,
        driver=driver,
        cache=KVCache(cfg.num_layers, cfg.num_heads, cfg.head_dim),
        counters=counters,
        budgets=budgets,
        collector=collector,
        sinks=tuple(sinks),
        collect_timeline=collect_timeline,
        prompt_len=prompt_len,
    )


def resolve_budgets(spec, budget, num_layers) -> list[int] | None:
    """Per-layer budgets for a spec; None means unbounded (full policy)."""
    spec = parse_policy(spec)
    if budget is None:
        if spec.kind != "full":
            raise ConfigError(f"policy {spec.kind} requires a budget")
        return None
    budget = int(budget)
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    pyramid = spec.pyramid_dict()
    if pyramid is None:
        return [budget] * num_layers
    return pyramid_allocate(budget, num_layers, pyramid["beta"], pyramid["window"])


def _apply_decisions(state: GenerationState, decisions) -> None:
    if not decisions:
        return
    for (layer, head), retained in decisions.items():
        state.cache.head(layer, head).retain(retained)


def _assert_bounds(state: GenerationState) -> None:
    if state.budgets is None:
        return
    cadence = state.policy.cadence
    if cadence == NEVER:
        return
    in_prefill = state.prompt_len is not None and state.n_processed < state.prompt_len
    for layer, head, hc in state.cache.iter_heads():
        if cadence == OVERFLOW:
            bound = state.budgets[layer]
        elif in_prefill:
            continue  # window policies compact the prompt only at prefill end
        else:
            bound = state.budgets[layer] + state.policy.interval
        if hc.size > bound:
            raise EngineError(
                f"cache size {hc.size} exceeds bound {bound} at layer {layer} head {head}"
            )


def decode_step(model: DecoderModel, state: GenerationState, token_id: int) -> np.ndarray:
    """Process one token: insert K/V, attend, run cadence hooks, return logits."""
    cfg = model.config
    token_id = int(token_id)
    if not 0 <= token_id < cfg.vocab_size:
        raise ConfigError(f"token id {token_id} outside vocabulary of size {cfg.vocab_size}")
    state.counters.phase = state.phase
    position = state.n_processed
    d = cfg.head_dim
    collector = state.collector
    want_full_rows = state.want_full_rows
    x = model.input_embedding(token_id, position)
    head_records: dict = {}
    layer_deviations: list[float] = []
    for layer_idx, layer in enumerate(model.layers):
        q_all = x @ layer.w_q
        k_all = x @ layer.w_k
        v_all = x @ layer.w_v
        attn = np.empty(cfg.model_dim, dtype=np.float64)
        attn_full = np.empty(cfg.model_dim, dtype=np.float64) if collector else None
        for head in range(cfg.num_heads):
            cols = slice(head * d, (head + 1) * d)
            q, k, v = q_all[cols], k_all[cols], v_all[cols]
            hc = state.cache.head(layer_idx, head)
            hc.insert(position, k, v)
            out, row = softmax_attention(q, hc.keys(), hc.values())
            attn[cols] = out
            full_out, full_row = softmax_attention(q, hc.full_keys(), hc.full_values())
            full_positions = hc.full_positions()
            live_positions = hc.positions()
            if collector is not None:
                attn_full[cols] = full_out
                collector.add_attention_loss(
                    layer_idx,
                    head,
                    attention_loss_step(full_positions, full_row, live_positions, row),
                )
            knorm = float(np.linalg.norm(k))
            obs_positions, obs_row = restrict_row(full_positions, full_row, live_positions)
            state.policy.observe_insert(layer_idx, head, position, knorm, key=k)
            state.policy.observe_row(layer_idx, head, obs_positions, obs_row)
            if state.sinks or state.collect_timeline:
                head_records[(layer_idx, head)] = HeadStepRecord(
                    row_positions=obs_positions,
                    row=obs_row,
                    knorm=knorm,
                    retained=live_positions,
                    full_positions=full_positions.copy() if want_full_rows else None,
                    full_row=full_row if want_full_rows else None,
                    key=k.copy() if want_full_rows else None,
                )
        x_attn = x + attn @ layer.w_o
        if collector is not None:
            x_attn_full = x + attn_full @ layer.w_o
            layer_deviations.append(output_deviation(model, layer_idx, x_attn_full, x_attn))
        x = mlp_block(x_attn, model, layer_idx)
    logits = x @ model.unembedding
    state.n_processed += 1
    if collector is not None:
        collector.finish_step(layer_deviations)
    # cadence: per-step hook, then prompt compaction on the last prefill token
    _apply_decisions(state, state.driver.after_step(state.phase, state.cache))
    if state.prompt_len is not None and state.n_processed == state.prompt_len:
        _apply_decisions(state, state.driver.at_prefill_end(state.cache))
    _assert_bounds(state)
    if state.sinks or state.collect_timeline:
        retained_now = {
            (layer, head): hc.positions() for layer, head, hc in state.cache.iter_heads()
        }
        for key_lh, rec in head_records.items():
            rec.retained = retained_now[key_lh]
        if state.collect_timeline:
            state.timeline.append(
                {lh: tuple(int(p) for p in pos) for lh, pos in retained_now.items()}
            )
        record = StepRecord(
            step=position, token=token_id, position=position, heads=head_records
        )
        for sink in state.sinks:
            sink.on_step(record)
    return logits


@dataclass
class GenerationResult:
    prompt: list[int]
    tokens: list[int]  # decoded tokens, including the EOS token if emitted
    terminated: bool
    n_processed: int
    policy_label: str
    budgets: list[int] | None
    timeline: list
    retained_at_end: dict
    retained_union: set
    metrics: object | None
    counters: dict
    wall_time_s: float
    prefill_passthrough: bool
    state: GenerationState


def generate(
    model: DecoderModel,
    prompt,
    max_tokens: int,
    policy_spec="full",
    budget: int | None = None,
    *,
    forced_tokens=None,
    sinks=(),
    collect_timeline: bool = True,
    compute_metrics: bool = True,
) -> GenerationResult:
    """Greedy decoding under an eviction policy.

    Stops at max_tokens or when the end-of-sequence token (id 0) is
    emitted; the EOS token is reported but never inserted into the cache.
    forced_tokens overrides the argmax choice step by step (teacher
    forcing), which is how live runs are compared against replayed ones.
    """
    cfg = model.config
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    for t in prompt:
        if not 0 <= t < cfg.vocab_size:
            raise ConfigError(f"prompt token {t} outside vocabulary of size {cfg.vocab_size}")
    if max_tokens < 0:
        raise ConfigError(f"max_tokens must be >= 0, got {max_tokens}")
    spec = parse_policy(policy_spec)
    state = start_generation(
        model,
        spec,
        budget,
        prompt_len=len(prompt),
        sinks=sinks,
        collect_timeline=collect_timeline,
        compute_metrics=compute_metrics,
    )
    started = time.perf_counter()
    logits = None
    for token in prompt:
        logits = decode_step(model, state, token)
    state.phase = "decode"
    state.counters.phase = "decode"
    steps = max_tokens if forced_tokens is None else min(max_tokens, len(forced_tokens))
    emitted: list[int] = []
    terminated = False
    for i in range(steps):
        token = int(forced_tokens[i]) if forced_tokens is not None else int(np.argmax(logits))
        emitted.append(token)
        if token == EOS_TOKEN_ID:
            terminated = True
            break
        logits = decode_step(model, state, token)
    _apply_decisions(state, state.driver.at_generation_end(state.cache))
    wall = time.perf_counter() - started
    retained_at_end = {
        (layer, head): tuple(int(p) for p in hc.positions())
        for layer, head, hc in state.cache.iter_heads()
    }
    return GenerationResult(
        prompt=prompt,
        tokens=emitted,
        terminated=terminated,
        n_processed=state.n_processed,
        policy_label=spec.label(),
        budgets=state.budgets,
        timeline=state.timeline,
        retained_at_end=retained_at_end,
        retained_union=state.cache.retained_union(),
        metrics=state.collector.summary() if state.collector else None,
        counters=state.counters.snapshot(),
        wall_time_s=wall,
        prefill_passthrough=getattr(state.policy, "prefill_passthrough", False),
        state=state,
    )
