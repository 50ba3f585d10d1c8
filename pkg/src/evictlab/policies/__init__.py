"""Eviction policies, their registry, and policy-spec parsing.

A policy spec is written `name[:key=value,...]`, optionally followed by
`+pyramid[:key=value,...]` to layer budgets in a pyramid over the model
depth, e.g. `h2o:recency_window=8+pyramid:beta=20`.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError
from .base import (
    NEVER,
    OVERFLOW,
    WINDOW,
    EvictionPolicy,
    FullPolicy,
    PolicyDriver,
    restrict_row,
    topk_comparison_charge,
)
from .h2o import H2OPolicy, h2o_evict, h2o_update
from .knorm import KNormPolicy, knorm_evict
from .pyramid import pyramid_allocate
from .rkv import RKVPolicy, rkv_decide
from .selection import max_pool_1d, oracle_topk, top_k_positions
from .snapkv import SnapKVDPolicy, snapkv_prefill, snapkvd_decide
from .streaming import StreamingLLMPolicy, streaming_llm_retain

_REGISTRY: dict[str, type[EvictionPolicy]] = {
    "full": FullPolicy,
    "streaming_llm": StreamingLLMPolicy,
    "h2o": H2OPolicy,
    "snapkv_d": SnapKVDPolicy,
    "knorm": KNormPolicy,
    "rkv": RKVPolicy,
}

# accepted parameters and their parsers, per policy name
_PARAM_TYPES: dict[str, dict[str, type]] = {
    "full": {},
    "streaming_llm": {"sink_size": int},
    "h2o": {"recency_window": int, "averaged": bool},
    "snapkv_d": {"window": int, "kernel": int},
    "knorm": {"protected_recent": int},
    "rkv": {"window": int, "buffer_interval": int, "kernel": int, "alpha": float},
}

_PYRAMID_PARAM_TYPES: dict[str, type] = {"beta": float, "window": int, "kernel": int}
_PYRAMID_DEFAULTS = {"beta": 20.0, "window": 64, "kernel": 5}


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    params: tuple = ()  # sorted (name, value) pairs
    pyramid: tuple | None = None  # sorted (name, value) pairs, or None

    def param_dict(self) -> dict:
        return dict(self.params)

    def pyramid_dict(self) -> dict | None:
        if self.pyramid is None:
            return None
        merged = dict(_PYRAMID_DEFAULTS)
        merged.update(dict(self.pyramid))
        return merged

    def label(self) -> str:
        text = self.kind
        if self.params:
            text += ":" + ",".join(f"{k}={_fmt(v)}" for k, v in self.params)
        if self.pyramid is not None:
            text += "+pyramid"
            if self.pyramid:
                text += ":" + ",".join(f"{k}={_fmt(v)}" for k, v in self.pyramid)
        return text


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, target: type, where: str):
    raw = raw.strip()
    if target is bool:
        low = raw.lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean (true/false), got {raw!r}")
    try:
        return target(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {target.__name__}, got {raw!r}") from None


def _parse_segment(segment: str, types: dict[str, type], where: str) -> tuple:
    if not segment:
        return ()
    pairs = []
    for item in segment.split(","):
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError(
                f"{where}: unknown parameter {key!r} (accepted: {sorted(types)})"
            )
        pairs.append((key, _parse_value(raw, types[key], f"{where}.{key}")))
    seen = [k for k, _ in pairs]
    for key in seen:
        if seen.count(key) > 1:
            raise ConfigError(f"{where}: parameter {key!r} given more than once")
    return tuple(sorted(pairs))


def parse_policy(text) -> PolicySpec:
    """Parse `name[:k=v,...][+pyramid[:k=v,...]]` into a PolicySpec."""
    if isinstance(text, PolicySpec):
        return text
    if not isinstance(text, str) or not text.strip():
        raise ConfigError(f"policy spec must be a non-empty string, got {text!r}")
    parts = text.strip().split("+")
    head, pyramid_part = parts[0], None
    if len(parts) == 2:
        pyramid_part = parts[1]
    elif len(parts) > 2:
        raise ConfigError(f"policy spec {text!r} has more than one '+' modifier")
    name, _, param_text = head.partition(":")
    name = name.strip()
    if name not in _REGISTRY:
        raise ConfigError(f"unknown policy {name!r} (available: {sorted(_REGISTRY)})")
    params = _parse_segment(param_text, _PARAM_TYPES[name], name)
    pyramid = None
    if pyramid_part is not None:
        mod_name, _, mod_params = pyramid_part.partition(":")
        if mod_name.strip() != "pyramid":
            raise ConfigError(f"unknown modifier {mod_name.strip()!r}; expected 'pyramid'")
        pyramid = _parse_segment(mod_params, _PYRAMID_PARAM_TYPES, "pyramid")
    return PolicySpec(kind=name, params=params, pyramid=pyramid)


def make_policy(spec) -> EvictionPolicy:
    spec = parse_policy(spec)
    return _REGISTRY[spec.kind](**spec.param_dict())


def policy_names() -> list[str]:
    return sorted(_REGISTRY)


__all__ = [
    "EvictionPolicy",
    "FullPolicy",
    "H2OPolicy",
    "KNormPolicy",
    "PolicyDriver",
    "PolicySpec",
    "RKVPolicy",
    "SnapKVDPolicy",
    "StreamingLLMPolicy",
    "NEVER",
    "OVERFLOW",
    "WINDOW",
    "h2o_evict",
    "h2o_update",
    "knorm_evict",
    "make_policy",
    "max_pool_1d",
    "oracle_topk",
    "parse_policy",
    "policy_names",
    "pyramid_allocate",
    "restrict_row",
    "rkv_decide",
    "snapkv_prefill",
    "snapkvd_decide",
    "streaming_llm_retain",
    "top_k_positions",
    "topk_comparison_charge",
]
