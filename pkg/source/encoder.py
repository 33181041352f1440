"""
Context encoder producing token embeddings H and per-head attention A.

ToyEncoder is a small trainable transformer (learned token and position
embeddings, post-LayerNorm self-attention layers). Any object with a
`max_window` attribute and an `encode_ids(ids) -> EncoderOutput` method can
stand in for it; encode_windowed() handles documents longer than one window.

Usage:
    params = ParameterSet(seed=0)
    encoder = ToyEncoder(EncoderConfig(vocab_size=len(vocab)), params, vocab)
    out = encode_windowed(encoder, flatten(doc))
    out.H.shape, out.A.shape    # (T, d_model), (num_heads, T, T)
"""
import math
from dataclasses import dataclass, asdict, fields
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from corpus import FlatIndex, Vocabulary
from numerics import (
    DiffTensor, ParameterSet, layer_norm, matmul, pad, relu, softmax, take, tensor_sum,
)


class SequenceLengthError(ValueError):
    """Input longer than the encoder can cover."""

    def __init__(self, length: int, limit: int):
        self.length = length
        self.limit = limit
        super().__init__(f"Sequence of {length} tokens exceeds the supported maximum of {limit}")


@dataclass
class EncoderConfig:
    d_model: int = 64
    num_heads: int = 2
    num_layers: int = 2
    vocab_size: int = 0
    max_window: int = 512
    ffn_dim: int = 128

    def validate(self) -> None:
        if self.d_model <= 0 or self.num_heads <= 0 or self.d_model % self.num_heads:
            raise ValueError(f"d_model ({self.d_model}) must be a positive multiple of num_heads ({self.num_heads})")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be at least 1, got {self.num_layers}")
        if self.max_window < 2:
            raise ValueError(f"max_window must be at least 2, got {self.max_window}")
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.ffn_dim < 1:
            raise ValueError(f"ffn_dim must be positive, got {self.ffn_dim}")

    @property
    def max_length(self) -> int:
        """Longest input the two-window scheme supports."""
        return 2 * self.max_window - 1

    def window_overlap(self, length: int) -> float:
        """Fraction of tokens covered by both windows (0 when one window suffices)."""
        if length <= self.max_window:
            return 0.0
        return (2 * self.max_window - length) / length

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'EncoderConfig':
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})


@dataclass
class EncoderOutput:
    """H: (tokens, d_model); A: (heads, tokens, tokens), rows summing to 1."""
    H: DiffTensor
    A: DiffTensor

    @property
    def num_tokens(self) -> int:
        return self.H.shape[0]


class ContextEncoder(Protocol):
    max_window: int

    def encode_ids(self, ids: Sequence[int]) -> EncoderOutput:
        ...


class EncoderLayer:
    """
    Multi-head self-attention, residual + LayerNorm, ReLU feed-forward, residual.

    Returns the layer's hidden states and its per-head attention.
    """

    def __init__(self, params: ParameterSet, prefix: str, d_model: int, num_heads: int, ffn_dim: int):
        if d_model % num_heads:
            raise ValueError(f"d_model ({d_model}) must be divisible by num_heads ({num_heads})")
        self.d_model = d_model
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.wq = params.create(f"{prefix}.wq", (d_model, d_model), fan_in=d_model)
        self.wk = params.create(f"{prefix}.wk", (d_model, d_model), fan_in=d_model)
        self.wv = params.create(f"{prefix}.wv", (d_model, d_model), fan_in=d_model)
        self.wo = params.create(f"{prefix}.wo", (d_model, d_model), fan_in=d_model)
        self.w1 = params.create(f"{prefix}.ffn.w1", (d_model, ffn_dim), fan_in=d_model)
        self.b1 = params.create(f"{prefix}.ffn.b1", (ffn_dim,), init="zeros")
        self.w2 = params.create(f"{prefix}.ffn.w2", (ffn_dim, d_model), fan_in=ffn_dim)
        self.b2 = params.create(f"{prefix}.ffn.b2", (d_model,), init="zeros")

    def _split_heads(self, x: DiffTensor) -> DiffTensor:
        tokens = x.shape[0]
        return x.reshape(tokens, self.num_heads, self.head_dim).transpose(1, 0, 2)

    def __call__(self, x: DiffTensor) -> Tuple[DiffTensor, DiffTensor]:
        tokens = x.shape[0]
        q = self._split_heads(matmul(x, self.wq))
        k = self._split_heads(matmul(x, self.wk))
        v = self._split_heads(matmul(x, self.wv))
        attention = softmax(matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim)), axis=-1)
        context = matmul(attention, v).transpose(1, 0, 2).reshape(tokens, self.d_model)
        hidden = layer_norm(x + matmul(context, self.wo))
        ffn = matmul(relu(matmul(hidden, self.w1) + self.b1), self.w2) + self.b2
        return hidden + ffn, attention


class ToyEncoder:
    """Small transformer over whitespace tokens; A is the last layer's raw per-head attention."""

    def __init__(self, config: EncoderConfig, params: ParameterSet,
                 vocabulary: Optional[Vocabulary] = None, prefix: str = "encoder"):
        config.validate()
        if vocabulary is not None and len(vocabulary) != config.vocab_size:
            raise ValueError(f"Vocabulary has {len(vocabulary)} tokens but vocab_size is {config.vocab_size}")
        self.config = config
        self.vocabulary = vocabulary
        self.max_window = config.max_window
        self.token_embedding = params.create(f"{prefix}.token_embedding", (config.vocab_size, config.d_model),
                                             fan_in=config.d_model)
        self.position_embedding = params.create(f"{prefix}.position_embedding",
                                                (config.max_window, config.d_model), fan_in=config.d_model)
        self.layers = [
            EncoderLayer(params, f"{prefix}.layer{i}", config.d_model, config.num_heads, config.ffn_dim)
            for i in range(config.num_layers)
        ]

    def token_ids(self, flat: FlatIndex) -> List[int]:
        if self.vocabulary is None:
            raise ValueError("ToyEncoder has no vocabulary; use encode_ids with raw ids")
        return self.vocabulary.encode(flat.flat_tokens)

    def encode_ids(self, ids: Sequence[int]) -> EncoderOutput:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size < 1:
            raise ValueError("Cannot encode an empty token sequence")
        if ids.size > self.max_window:
            raise SequenceLengthError(int(ids.size), self.max_window)
        bad = ids[(ids < 0) | (ids >= self.config.vocab_size)]
        if bad.size:
            raise ValueError(f"Token id {int(bad[0])} outside vocabulary of size {self.config.vocab_size}")
        x = take(self.token_embedding, ids) + take(self.position_embedding, np.arange(ids.size))
        attention = None
        for layer in self.layers:
            x, attention = layer(x)
        return EncoderOutput(H=x, A=attention)

    def encode(self, flat: FlatIndex) -> EncoderOutput:
        """Single-window encoding of a flattened document."""
        return self.encode_ids(self.token_ids(flat))


def encode_windowed(encoder: ContextEncoder, tokens: Union[FlatIndex, Sequence[int]]) -> EncoderOutput:
    """
    Encode inputs longer than one window with two overlapping windows.

    Windows are [0, W) and [n - W, n). Overlapping H rows are averaged. A
    entries are averaged where both windows cover the token pair, zero for
    pairs no window covers, and every row is then renormalized to sum to 1.

    Args:
        encoder: object with max_window and encode_ids
        tokens: FlatIndex (ids via the encoder's vocabulary) or raw token ids

    Returns:
        EncoderOutput over all n tokens
    """
    ids = list(encoder.token_ids(tokens)) if isinstance(tokens, FlatIndex) else list(tokens)
    n = len(ids)
    window = encoder.max_window
    if n <= window:
        return encoder.encode_ids(ids)
    if n > 2 * window - 1:
        raise SequenceLengthError(n, 2 * window - 1)

    offset = n - window
    first = encoder.encode_ids(ids[:window])
    second = encoder.encode_ids(ids[offset:])

    covered_first = np.arange(n) < window
    covered_second = np.arange(n) >= offset
    coverage = covered_first.astype(float) + covered_second.astype(float)
    H = (pad(first.H, [(0, offset), (0, 0)]) + pad(second.H, [(offset, 0), (0, 0)])) \
        * DiffTensor(1.0 / coverage[:, None])

    pair_coverage = (np.outer(covered_first, covered_first).astype(float)
                     + np.outer(covered_second, covered_second).astype(float))
    summed = pad(first.A, [(0, 0), (0, offset), (0, offset)]) + pad(second.A, [(0, 0), (offset, 0), (offset, 0)])
    averaged = summed * DiffTensor(1.0 / np.maximum(pair_coverage, 1.0))
    A = averaged / tensor_sum(averaged, axis=-1, keepdims=True)
    return EncoderOutput(H=H, A=A)
