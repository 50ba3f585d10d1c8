"""evictlab: an instrumented decoder with pluggable KV-cache eviction.

A deliberately small dense decoder whose attention internals are fully
observable, a family of cache eviction policies behind one interface, and
the metrics, trace format, and sweep harness needed to compare them.
"""

from ._version import __version__
from .cache import HeadCache, KVCache
from .engine import (
    GenerationResult,
    decode_step,
    generate,
    resolve_budgets,
    start_generation,
)
from .errors import (
    ConfigError,
    EmptyContextError,
    EngineError,
    ReplayCompatibilityError,
    TraceError,
    TraceFormatError,
)
from .harness import (
    aggregate_rows,
    emit_reports,
    load_bundle,
    load_config,
    materialize_prompts,
    run_sweep,
    validate_config,
    wilson_interval,
    write_bundle,
)
from .metrics import (
    MetricsCollector,
    MetricsSummary,
    OpCounters,
    attention_loss_step,
    critical_retention,
    latency_per_token,
    opcount_model,
    output_deviation,
    throughput,
)
from .model import (
    EOS_TOKEN_ID,
    DecoderModel,
    ModelConfig,
    init_model,
    mlp_block,
    softmax_attention,
)
from .policies import (
    FullPolicy,
    H2OPolicy,
    KNormPolicy,
    PolicyDriver,
    PolicySpec,
    RKVPolicy,
    SnapKVDPolicy,
    StreamingLLMPolicy,
    h2o_evict,
    knorm_evict,
    make_policy,
    max_pool_1d,
    oracle_topk,
    parse_policy,
    policy_names,
    pyramid_allocate,
    restrict_row,
    rkv_decide,
    snapkv_prefill,
    snapkvd_decide,
    streaming_llm_retain,
    top_k_positions,
)
from .trace import (
    ReplayResult,
    Trace,
    TraceWriter,
    export_jsonl,
    import_jsonl,
    load,
    record,
    replay,
    save,
)

__all__ = [
    "__version__",
    "EOS_TOKEN_ID",
    "ModelConfig",
    "DecoderModel",
    "init_model",
    "softmax_attention",
    "mlp_block",
    "HeadCache",
    "KVCache",
    "ConfigError",
    "EngineError",
    "EmptyContextError",
    "TraceError",
    "TraceFormatError",
    "ReplayCompatibilityError",
    "generate",
    "decode_step",
    "start_generation",
    "resolve_budgets",
    "GenerationResult",
    "PolicySpec",
    "parse_policy",
    "make_policy",
    "policy_names",
    "PolicyDriver",
    "FullPolicy",
    "StreamingLLMPolicy",
    "H2OPolicy",
    "SnapKVDPolicy",
    "KNormPolicy",
    "RKVPolicy",
    "streaming_llm_retain",
    "h2o_evict",
    "knorm_evict",
    "snapkv_prefill",
    "snapkvd_decide",
    "rkv_decide",
    "pyramid_allocate",
    "oracle_topk",
    "top_k_positions",
    "max_pool_1d",
    "restrict_row",
    "attention_loss_step",
    "output_deviation",
    "critical_retention",
    "throughput",
    "latency_per_token",
    "opcount_model",
    "OpCounters",
    "MetricsCollector",
    "MetricsSummary",
    "Trace",
    "TraceWriter",
    "load",
    "save",
    "record",
    "replay",
    "export_jsonl",
    "import_jsonl",
    "ReplayResult",
    "validate_config",
    "load_config",
    "materialize_prompts",
    "run_sweep",
    "aggregate_rows",
    "wilson_interval",
    "write_bundle",
    "load_bundle",
    "emit_reports",
]
