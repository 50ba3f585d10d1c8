"""Deterministic toy decoder-only transformer.

All math is float64. Weights come from counter-based Philox streams keyed
per tensor, so identical (config, seed) pairs produce bit-identical models
regardless of platform or construction order. Positions enter the model
only through learned-style absolute position embeddings added at the
input; keys are never rotated, which keeps eviction bookkeeping in plain
absolute positions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyContextError, EngineError

# Token id 0 is reserved as end-of-sequence.
EOS_TOKEN_ID = 0

# Tensor tags for the per-tensor Philox keys. Position-embedding rows live
# in a separate tag space above _POS_TAG_BASE so they can be generated
# lazily, one independent stream per position.
_TAG_TOKEN_EMBEDDING = 0
_TAG_UNEMBEDDING = 1
_TAG_LAYER_BASE = 16
_TAGS_PER_LAYER = 8
_POS_TAG_BASE = 1 << 32


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seed for a toy decoder model.

    The defaults give the desk-scale reference model used throughout the
    test suite and demos: 2 layers, 2 heads of width 8, a 16-unit MLP, and
    a 64-token vocabulary.
    """

    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 8
    mlp_hidden: int = 16
    vocab_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "mlp_hidden", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (token id 0 is reserved for EOS)")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim


def _tensor_stream(seed: int, tag: int) -> np.random.Generator:
    key = np.array([seed, tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _init_matrix(seed: int, tag: int, shape: tuple[int, int], fan_in: int) -> np.ndarray:
    # Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; bounded activations at toy scale.
    scale = 1.0 / np.sqrt(float(fan_in))
    matrix = (2.0 * _tensor_stream(seed, tag).random(shape, dtype=np.float64) - 1.0) * scale
    matrix.flags.writeable = False
    return matrix


@dataclass
class LayerWeights:
    """One decoder layer: QKV projections, output projector, MLP."""

    w_q: np.ndarray  # (model_dim, model_dim)
    w_k: np.ndarray  # (model_dim, model_dim)
    w_v: np.ndarray  # (model_dim, model_dim)
    w_o: np.ndarray  # (model_dim, model_dim)
    w_1: np.ndarray  # (model_dim, mlp_hidden)
    w_2: np.ndarray  # (mlp_hidden, model_dim)


@dataclass
class DecoderModel:
    """Weights of the toy decoder; read-only after construction."""

    config: ModelConfig
    token_embedding: np.ndarray  # (vocab_size, model_dim)
    layers: list[LayerWeights]
    unembedding: np.ndarray  # (model_dim, vocab_size)
    _pos_rows: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def position_embedding(self, position: int) -> np.ndarray:
        """Absolute position embedding row, generated from its own stream.

        Rows are independent of generation order, so the table is
        effectively unbounded while staying bit-reproducible.
        """
        row = self._pos_rows.get(position)
        if row is None:
            if position < 0:
                raise ConfigError(f"position must be non-negative, got {position}")
            row = _init_matrix(
                self.config.seed,
                _POS_TAG_BASE + position,
                (1, self.config.model_dim),
                self.config.model_dim,
            )[0]
            self._pos_rows[position] = row
        return row

    def input_embedding(self, token_id: int, position: int) -> np.ndarray:
        if not 0 <= token_id < self.config.vocab_size:
            raise ConfigError(
                f"token id {token_id} outside vocabulary of size {self.config.vocab_size}"
            )
        return self.token_embedding[token_id] + self.position_embedding(position)

    def split_heads(self, x: np.ndarray) -> np.ndarray:
        """(model_dim,) -> (num_heads, head_dim)."""
        return x.reshape(self.config.num_heads, self.config.head_dim)

    def checksum(self) -> str:
        """SHA-256 over all weight tensors in a fixed order."""
        digest = hashlib.sha256()
        digest.update(self.token_embedding.tobytes())
        for layer in self.layers:
            for w in (layer.w_q, layer.w_k, layer.w_v, layer.w_o, layer.w_1, layer.w_2):
                digest.update(w.tobytes())
        digest.update(self.unembedding.tobytes())
        return digest.hexdigest()


def init_model(config: ModelConfig) -> DecoderModel:
    """Build a model with deterministic weights for (config, seed)."""
    d_model = config.model_dim
    token_embedding = _init_matrix(
        config.seed, _TAG_TOKEN_EMBEDDING, (config.vocab_size, d_model), d_model
    )
    unembedding = _init_matrix(
        config.seed, _TAG_UNEMBEDDING, (d_model, config.vocab_size), d_model
    )
    layers = []
    for layer_idx in range(config.num_layers):
        base = _TAG_LAYER_BASE + layer_idx * _TAGS_PER_LAYER
        layers.append(
            LayerWeights(
                w_q=_init_matrix(config.seed, base + 0, (d_model, d_model), d_model),
                w_k=_init_matrix(config.seed, base + 1, (d_model, d_model), d_model),
                w_v=_init_matrix(config.seed, base + 2, (d_model, d_model), d_model),
                w_o=_init_matrix(config.seed, base + 3, (d_model, d_model), d_model),
                w_1=_init_matrix(config.seed, base + 4, (d_model, config.mlp_hidden), d_model),
                w_2=_init_matrix(
                    config.seed, base + 5, (config.mlp_hidden, d_model), config.mlp_hidden
                ),
            )
        )
    return DecoderModel(
        config=config,
        token_embedding=token_embedding,
        layers=layers,
        unembedding=unembedding,
    )


def softmax_attention(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention for a single query.

    Returns (output, scores): the probability row is returned alongside the
    weighted value sum so policies and instrumentation can consume it.
    """
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise EmptyContextError("attention requires at least one cached key")
    if values.shape != keys.shape:
        raise EngineError(f"keys shape {keys.shape} does not match values shape {values.shape}")
    head_dim = keys.shape[1]
    logits = keys @ q / np.sqrt(float(head_dim))
    shifted = np.exp(logits - logits.max())
    scores = shifted / shifted.sum()
    return scores @ values, scores


def mlp_block(x: np.ndarray, model: DecoderModel, layer: int) -> np.ndarray:
    """Residual two-layer MLP: x + relu(x @ W1) @ W2."""
    weights = model.layers[layer]
    if x.shape != (model.config.model_dim,):
        raise ConfigError(
            f"mlp_block expects a vector of length {model.config.model_dim}, got shape {x.shape}"
        )
    hidden = np.maximum(x @ weights.w_1, 0.0)
    return x + hidden @ weights.w_2
