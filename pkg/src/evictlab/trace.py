"""Trace recording, loading, JSONL interop, and offline policy replay.

Binary container layout (little-endian throughout; see docs/trace-format.md):

    magic    4 bytes  b"EVTR"
    version  u16      currently 1
    hlen     u32      header byte length
    header   hlen bytes of canonical JSON (sorted keys, no spaces)
    records  repeated:
      reclen u32      payload byte length
      payload:
        step u32, token i64, position i64, then per (layer, head) in
        layer-major order:
          m u32, m*i64 row positions, m*f64 row probs, f64 key norm,
          r u32, r*i64 retained positions,
          and, only when the header says full_rows: klen u32, klen*f64 key
    footer   u32 0xFFFFFFFF, u32 n_steps, u32 crc32 of all preceding bytes

A writer that dies mid-run finalizes with a u32 0xFFFFFFFE abort marker
instead of the footer, so partial files are recognizable. The JSONL form
is a lossless textual twin: one header line, then one object per
(step, layer, head).
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._version import __version__ as _pkg_version
from .errors import ReplayCompatibilityError, TraceFormatError
from .metrics import MetricsCollector, OpCounters, attention_loss_step
from .model import ModelConfig
from .policies import PolicyDriver, make_policy, parse_policy, restrict_row

MAGIC = b"EVTR"
FORMAT_VERSION = 1
FOOTER_SENTINEL = 0xFFFFFFFF
ABORT_SENTINEL = 0xFFFFFFFE
NATIVE_ROW_SUM_TOL = 1e-6
EXTERNAL_ROW_SUM_TOL = 1e-3

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class TraceHeadStep:
    positions: np.ndarray  # i64, alignment of `row`
    row: np.ndarray  # f64 attention probabilities
    knorm: float
    retained: np.ndarray  # i64, live positions after the step
    key: np.ndarray | None = None  # f64 key vector, only in full-rows traces


@dataclass
class TraceStep:
    step: int
    token: int
    position: int
    heads: dict  # (layer, head) -> TraceHeadStep


@dataclass
class Trace:
    header: dict
    steps: list
    warnings: list = field(default_factory=list)
    raw_header: bytes | None = None

    @property
    def num_layers(self) -> int:
        return int(self.header["model"]["num_layers"])

    @property
    def num_heads(self) -> int:
        return int(self.header["model"]["num_heads"])

    @property
    def head_dim(self) -> int:
        return int(self.header["model"]["head_dim"])

    @property
    def prompt_length(self) -> int:
        return int(self.header["prompt_length"])

    @property
    def policy(self) -> str:
        return str(self.header["policy"])

    @property
    def budget(self):
        return self.header.get("budget")

    @property
    def full_rows(self) -> bool:
        return bool(self.header.get("full_rows", False))

    @property
    def external(self) -> bool:
        return bool(self.header.get("external", False))


def make_header(
    model_config: ModelConfig,
    prompt,
    policy_label: str,
    budget,
    full_rows: bool,
    external: bool = False,
    created_unix: float | None = None,
) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "engine": f"evictlab-{_pkg_version}",
        "external": bool(external),
        "model": {
            "num_layers": model_config.num_layers,
            "num_heads": model_config.num_heads,
            "head_dim": model_config.head_dim,
            "mlp_hidden": model_config.mlp_hidden,
            "vocab_size": model_config.vocab_size,
            "seed": model_config.seed,
        },
        "prompt_length": len(prompt),
        "prompt": [int(t) for t in prompt],
        "policy": str(policy_label),
        "budget": None if budget is None else int(budget),
        "full_rows": bool(full_rows),
        "created_unix": time.time() if created_unix is None else float(created_unix),
    }


def _pack_head(out: bytearray, positions, row, knorm, retained, key, full_rows: bool) -> None:
    positions = np.asarray(positions, dtype="<i8")
    row = np.asarray(row, dtype="<f8")
    retained = np.asarray(retained, dtype="<i8")
    out += _U32.pack(positions.size)
    out += positions.tobytes()
    out += row.tobytes()
    out += _F64.pack(float(knorm))
    out += _U32.pack(retained.size)
    out += retained.tobytes()
    if full_rows:
        key = np.asarray(key, dtype="<f8")
        out += _U32.pack(key.size)
        out += key.tobytes()


class TraceWriter:
    """Streaming trace recorder; attach as an engine sink.

    With full_rows=True the counterfactual full attention row and the raw
    key vector are stored per head, which is what cross-policy replay of
    key-based policies needs; the default stores the retained-aligned row.
    Use as a context manager: a normal exit finalizes the footer, an
    exceptional exit writes the abort marker so the file is recognizably
    partial.
    """

    full_rows = False

    def __init__(
        self,
        path,
        model_config: ModelConfig,
        prompt,
        policy_label: str,
        budget,
        full_rows: bool = False,
        created_unix: float | None = None,
    ) -> None:
        self.path = str(path)
        self.full_rows = bool(full_rows)
        self._grid = (model_config.num_layers, model_config.num_heads)
        header = make_header(
            model_config, prompt, policy_label, budget, self.full_rows, created_unix=created_unix
        )
        self._file = open(self.path, "wb")
        self._crc = 0
        self._n_steps = 0
        self._finalized = False
        raw = _canonical_json(header)
        self._write(MAGIC + _U16.pack(FORMAT_VERSION) + _U32.pack(len(raw)) + raw)

    def _write(self, data: bytes) -> None:
        self._file.write(data)
        self._crc = zlib.crc32(data, self._crc)

    def on_step(self, record) -> None:
        num_layers, num_heads = self._grid
        payload = bytearray()
        payload += _U32.pack(record.step)
        payload += _I64.pack(record.token)
        payload += _I64.pack(record.position)
        for layer in range(num_layers):
            for head in range(num_heads):
                rec = record.heads[(layer, head)]
                if self.full_rows:
                    _pack_head(
                        payload,
                        rec.full_positions,
                        rec.full_row,
                        rec.knorm,
                        rec.retained,
                        rec.key,
                        True,
                    )
                else:
                    _pack_head(
                        payload, rec.row_positions, rec.row, rec.knorm, rec.retained, None, False
                    )
        self._write(_U32.pack(len(payload)) + bytes(payload))
        self._n_steps += 1

    def close(self) -> None:
        if self._finalized:
            return
        self._finalized = True
        self._file.write(_U32.pack(FOOTER_SENTINEL) + _U32.pack(self._n_steps) + _U32.pack(self._crc))
        self._file.close()

    def abort(self) -> None:
        if self._finalized:
            return
        self._finalized = True
        try:
            self._file.write(_U32.pack(ABORT_SENTINEL))
        finally:
            self._file.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self.abort()


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int, what: str):
        if self.offset + n > len(self.data):
            raise TraceFormatError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u16(self, what: str) -> int:
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()


def _validate_header(header: dict, path: str) -> None:
    problems = []
    if not isinstance(header, dict):
        raise TraceFormatError(f"{path}: header is not a JSON object")
    model = header.get("model")
    if not isinstance(model, dict):
        problems.append("model: missing or not an object")
    else:
        for key in ("num_layers", "num_heads", "head_dim"):
            value = model.get(key)
            if not isinstance(value, int) or value < 1:
                problems.append(f"model.{key}: expected a positive integer, got {value!r}")
    if not isinstance(header.get("prompt_length"), int) or header["prompt_length"] < 0:
        problems.append("prompt_length: expected a non-negative integer")
    if "policy" not in header:
        problems.append("policy: missing")
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        problems.append(
            f"format_version: expected {FORMAT_VERSION}, got {header.get('format_version')!r}"
        )
    if problems:
        raise TraceFormatError(f"{path}: invalid header: " + "; ".join(problems))


def _check_row_sums(trace: Trace, path: str) -> None:
    tol = EXTERNAL_ROW_SUM_TOL if trace.external else NATIVE_ROW_SUM_TOL
    for step in trace.steps:
        for (layer, head), rec in step.heads.items():
            if rec.row.size == 0:
                raise TraceFormatError(
                    f"{path}: empty attention row at step {step.step} layer {layer} head {head}"
                )
            drift = abs(float(rec.row.sum()) - 1.0)
            if drift > tol:
                raise TraceFormatError(
                    f"{path}: attention row sums to 1{drift:+.2e} at step {step.step} "
                    f"layer {layer} head {head} (tolerance {tol:g})"
                )
            if trace.external and drift > NATIVE_ROW_SUM_TOL:
                trace.warnings.append(
                    f"step {step.step} layer {layer} head {head}: row sum off by "
                    f"{drift:.2e}, accepted under the external tolerance"
                )


def load(path) -> Trace:
    """Read and validate a binary trace; raises TraceFormatError on damage."""
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data, str(path))
    if reader.take(4, "magic") != MAGIC:
        raise TraceFormatError(f"{path}: not a trace file (bad magic)")
    version = reader.u16("version")
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {version}")
    hlen = reader.u32("header length")
    raw_header = reader.take(hlen, "header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    _validate_header(header, str(path))
    num_layers = int(header["model"]["num_layers"])
    num_heads = int(header["model"]["num_heads"])
    full_rows = bool(header.get("full_rows", False))
    steps: list[TraceStep] = []
    while True:
        last = f"step {steps[-1].step}" if steps else "the header"
        if reader.offset + 4 > len(data):
            raise TraceFormatError(f"{path}: no footer; last valid record is {last}")
        marker = reader.u32("record length")
        if marker == FOOTER_SENTINEL:
            break
        if marker == ABORT_SENTINEL:
            raise TraceFormatError(
                f"{path}: writer aborted mid-run; last valid record is {last}"
            )
        payload_start = reader.offset
        try:
            step_idx = reader.u32("step index")
            token = _I64.unpack(reader.take(8, "token"))[0]
            position = _I64.unpack(reader.take(8, "position"))[0]
            heads = {}
            for layer in range(num_layers):
                for head in range(num_heads):
                    m = reader.u32("row length")
                    positions = reader.array(m, "<i8", "row positions")
                    row = reader.array(m, "<f8", "row probabilities")
                    knorm = _F64.unpack(reader.take(8, "key norm"))[0]
                    r = reader.u32("retained length")
                    retained = reader.array(r, "<i8", "retained positions")
                    key = None
                    if full_rows:
                        klen = reader.u32("key length")
                        key = reader.array(klen, "<f8", "key vector")
                    heads[(layer, head)] = TraceHeadStep(
                        positions=positions, row=row, knorm=knorm, retained=retained, key=key
                    )
        except TraceFormatError:
            raise TraceFormatError(
                f"{path}: truncated record; last valid record is {last}"
            ) from None
        if reader.offset - payload_start != marker:
            raise TraceFormatError(
                f"{path}: record length mismatch after {last} "
                f"(declared {marker}, parsed {reader.offset - payload_start})"
            )
        steps.append(TraceStep(step=step_idx, token=token, position=position, heads=heads))
    n_steps = reader.u32("footer step count")
    crc = reader.u32("footer checksum")
    if reader.offset != len(data):
        raise TraceFormatError(f"{path}: {len(data) - reader.offset} trailing bytes after footer")
    if n_steps != len(steps):
        raise TraceFormatError(
            f"{path}: footer claims {n_steps} steps, file contains {len(steps)}"
        )
    actual_crc = zlib.crc32(data[: len(data) - 12])
    if crc != actual_crc:
        raise TraceFormatError(
            f"{path}: checksum mismatch (footer {crc:#010x}, computed {actual_crc:#010x})"
        )
    trace = Trace(header=header, steps=steps, raw_header=raw_header)
    _check_row_sums(trace, str(path))
    return trace


def save(trace: Trace, path) -> None:
    """Serialize a Trace back to the binary container (lossless)."""
    raw = trace.raw_header if trace.raw_header is not None else _canonical_json(trace.header)
    full_rows = trace.full_rows
    with open(path, "wb") as f:
        crc = 0

        def write(chunk: bytes) -> None:
            nonlocal crc
            f.write(chunk)
            crc = zlib.crc32(chunk, crc)

        write(MAGIC + _U16.pack(FORMAT_VERSION) + _U32.pack(len(raw)) + raw)
        for step in trace.steps:
            payload = bytearray()
            payload += _U32.pack(step.step)
            payload += _I64.pack(step.token)
            payload += _I64.pack(step.position)
            for layer in range(trace.num_layers):
                for head in range(trace.num_heads):
                    rec = step.heads[(layer, head)]
                    _pack_head(
                        payload, rec.positions, rec.row, rec.knorm, rec.retained, rec.key, full_rows
                    )
            write(_U32.pack(len(payload)) + bytes(payload))
        f.write(_U32.pack(FOOTER_SENTINEL) + _U32.pack(len(trace.steps)) + _U32.pack(crc))


# -- JSONL interop ------------------------------------------------------------


def export_jsonl(trace: Trace, path) -> None:
    """Write the lossless textual twin: header line, then one line per
    (step, layer, head)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(_canonical_json({"header": trace.header}).decode("utf-8") + "\n")
        for step in trace.steps:
            for layer in range(trace.num_layers):
                for head in range(trace.num_heads):
                    rec = step.heads[(layer, head)]
                    obj = {
                        "step": step.step,
                        "token": step.token,
                        "position": step.position,
                        "layer": layer,
                        "head": head,
                        "row": [
                            {"pos": int(p), "p": float(v)}
                            for p, v in zip(rec.positions, rec.row)
                        ],
                        "knorm": float(rec.knorm),
                        "retained": [int(p) for p in rec.retained],
                    }
                    if trace.full_rows:
                        obj["key"] = [float(v) for v in rec.key]
                    f.write(_canonical_json(obj).decode("utf-8") + "\n")


def import_jsonl(path) -> Trace:
    """Parse the JSONL schema, e.g. from an external exporter.

    Files without an engine field are treated as external and validated
    under the looser row-sum tolerance.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in (raw.strip() for raw in f) if line]
    if not lines:
        raise TraceFormatError(f"{path}: empty file")

    def parse_line(i: int):
        try:
            return json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{path}: line {i + 1} is not valid JSON: {exc}") from exc

    first = parse_line(0)
    if not isinstance(first, dict) or "header" not in first:
        raise TraceFormatError(f"{path}: first line must be the header object")
    header = first["header"]
    if isinstance(header, dict):
        header.setdefault("format_version", FORMAT_VERSION)
        header.setdefault("external", "engine" not in header)
        header.setdefault("policy", "external")
        header.setdefault("full_rows", False)
    _validate_header(header, str(path))
    num_layers = int(header["model"]["num_layers"])
    num_heads = int(header["model"]["num_heads"])
    full_rows = bool(header.get("full_rows", False))
    by_step: dict[int, TraceStep] = {}
    for i in range(1, len(lines)):
        obj = parse_line(i)
        where = f"{path}: line {i + 1}"
        try:
            step_idx = int(obj["step"])
            layer = int(obj["layer"])
            head = int(obj["head"])
            row_items = obj["row"]
            positions = np.array([int(e["pos"]) for e in row_items], dtype=np.int64)
            row = np.array([float(e["p"]) for e in row_items], dtype=np.float64)
            rec = TraceHeadStep(
                positions=positions,
                row=row,
                knorm=float(obj["knorm"]),
                retained=np.array([int(p) for p in obj["retained"]], dtype=np.int64),
                key=np.array([float(v) for v in obj["key"]], dtype=np.float64)
                if full_rows
                else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"{where}: malformed record: {exc}") from exc
        if not 0 <= layer < num_layers or not 0 <= head < num_heads:
            raise TraceFormatError(f"{where}: layer/head outside the model grid")
        step = by_step.get(step_idx)
        if step is None:
            step = TraceStep(
                step=step_idx, token=int(obj["token"]), position=int(obj["position"]), heads={}
            )
            by_step[step_idx] = step
        if (layer, head) in step.heads:
            raise TraceFormatError(f"{where}: duplicate (step, layer, head)")
        step.heads[(layer, head)] = rec
    steps = [by_step[k] for k in sorted(by_step)]
    expected = list(range(len(steps)))
    if [s.step for s in steps] != expected:
        raise TraceFormatError(f"{path}: step indices are not contiguous from 0")
    for step in steps:
        if len(step.heads) != num_layers * num_heads:
            raise TraceFormatError(
                f"{path}: step {step.step} has {len(step.heads)} head records, "
                f"expected {num_layers * num_heads}"
            )
    trace = Trace(header=header, steps=steps)
    _check_row_sums(trace, str(path))
    return trace


# -- replay -------------------------------------------------------------------


class _ReplayHead:
    """Live position list (and optional key store) for one replayed head."""

    def __init__(self, with_keys: bool, head_dim: int) -> None:
        self.live: list[int] = []
        self.key_store: dict[int, np.ndarray] | None = {} if with_keys else None
        self.head_dim = head_dim

    def insert(self, position: int, key) -> None:
        self.live.append(position)
        if self.key_store is not None:
            self.key_store[position] = np.asarray(key, dtype=np.float64)

    def retain(self, retained) -> None:
        keep = set(int(p) for p in retained)
        self.live = [p for p in self.live if p in keep]
        if self.key_store is not None:
            for p in [p for p in self.key_store if p not in keep]:
                del self.key_store[p]

    def positions(self) -> np.ndarray:
        return np.asarray(self.live, dtype=np.int64)

    def keys(self) -> np.ndarray:
        return np.vstack([self.key_store[p] for p in self.live]) if self.live else np.zeros(
            (0, self.head_dim)
        )


class _ReplayCache:
    def __init__(self, num_layers: int, num_heads: int, with_keys: bool, head_dim: int) -> None:
        self.grid = {
            (layer, head): _ReplayHead(with_keys, head_dim)
            for layer in range(num_layers)
            for head in range(num_heads)
        }

    def head(self, layer: int, head: int) -> _ReplayHead:
        return self.grid[(layer, head)]

    def iter_heads(self):
        for (layer, head), hs in sorted(self.grid.items()):
            yield layer, head, hs


@dataclass
class ReplayResult:
    policy_label: str
    budgets: list[int] | None
    timeline: list
    retained_at_end: dict
    counters: dict
    attention_loss_map: list | None
    steps: int


def replay(trace: Trace, policy_spec, budget: int | None) -> ReplayResult:
    """Re-run a policy's decisions over recorded attention rows.

    Replaying the recorded (policy, budget) is always allowed and is
    bit-exact by construction. Replaying anything else needs rows that
    cover every position, i.e. a trace recorded under the full policy;
    key-based policies additionally need the stored key vectors.
    """
    from .engine import resolve_budgets  # local import to avoid a cycle

    spec = parse_policy(policy_spec)
    policy = make_policy(spec)
    label = spec.label()
    same_run = label == trace.policy and (budget if budget is None else int(budget)) == trace.budget
    if not same_run and trace.policy != "full":
        raise ReplayCompatibilityError(
            f"trace was recorded under {trace.policy!r}; its rows only cover that "
            f"run's retained positions, so {label!r} cannot be replayed over it"
        )
    has_keys = trace.full_rows
    if policy.needs_keys and not has_keys:
        raise ReplayCompatibilityError(
            f"{label!r} needs key vectors; this trace was recorded without full rows"
        )
    budgets = resolve_budgets(spec, budget, trace.num_layers)
    counters = OpCounters()
    driver = PolicyDriver(
        policy, trace.num_layers, trace.num_heads, trace.head_dim, budgets, counters
    )
    cache = _ReplayCache(trace.num_layers, trace.num_heads, policy.needs_keys, trace.head_dim)
    collect_loss = trace.policy == "full"
    collector = MetricsCollector(trace.num_layers, trace.num_heads) if collect_loss else None
    prompt_length = trace.prompt_length
    timeline = []
    for step in trace.steps:
        phase = "prefill" if step.step < prompt_length else "decode"
        counters.phase = phase
        for layer, head, hs in cache.iter_heads():
            rec = step.heads[(layer, head)]
            hs.insert(step.position, rec.key if policy.needs_keys else None)
            live = hs.positions()
            obs_positions, obs_row = restrict_row(rec.positions, rec.row, live)
            policy.observe_insert(layer, head, step.position, rec.knorm, key=rec.key)
            policy.observe_row(layer, head, obs_positions, obs_row)
            if collector is not None:
                collector.add_attention_loss(
                    layer,
                    head,
                    attention_loss_step(rec.positions, rec.row, obs_positions, obs_row),
                )
        decisions = driver.after_step(phase, cache)
        if decisions:
            for (layer, head), retained in decisions.items():
                cache.head(layer, head).retain(retained)
        if step.step == prompt_length - 1:
            decisions = driver.at_prefill_end(cache)
            if decisions:
                for (layer, head), retained in decisions.items():
                    cache.head(layer, head).retain(retained)
        timeline.append(
            {
                (layer, head): tuple(hs.live)
                for (layer, head), hs in sorted(cache.grid.items())
            }
        )
    decisions = driver.at_generation_end(cache)
    if decisions:
        for (layer, head), retained in decisions.items():
            cache.head(layer, head).retain(retained)
    retained_at_end = {
        (layer, head): tuple(hs.live) for (layer, head), hs in sorted(cache.grid.items())
    }
    return ReplayResult(
        policy_label=label,
        budgets=budgets,
        timeline=timeline,
        retained_at_end=retained_at_end,
        counters=counters.snapshot(),
        attention_loss_map=collector.loss_map.tolist() if collector is not None else None,
        steps=len(trace.steps),
    )


def record(
    model,
    prompt,
    max_tokens: int,
    policy_spec,
    budget,
    path,
    *,
    full_rows: bool = False,
    forced_tokens=None,
):
    """Generate with a TraceWriter attached; returns the GenerationResult."""
    from .engine import generate

    spec = parse_policy(policy_spec)
    with TraceWriter(
        path, model.config, prompt, spec.label(), budget, full_rows=full_rows
    ) as writer:
        result = generate(
            model,
            prompt,
            max_tokens,
            spec,
            budget,
            forced_tokens=forced_tokens,
            sinks=(writer,),
        )
    return result
