"""Permutation-invariant pooling of a set of slice encodings.

Every aggregator takes a ``[p, d]`` tensor whose rows are the encodings of
the slices of one scan (row order carries no meaning) and returns one vector.
Set reductions sort along the set axis before summing, so permuting the rows
leaves the output bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, linear, set_max, set_mean, set_weighted_sum, softmax
from .errors import ConfigurationError, EmptySetError


def _check_set(encodings: Tensor) -> None:
    if encodings.ndim != 2:
        raise ConfigurationError(f"encoding set must be [p, d], got shape {encodings.shape}")
    if encodings.shape[0] == 0:
        raise EmptySetError("encoding set is empty")


def aggregate_mean(encodings: Tensor) -> Tensor:
    _check_set(encodings)
    return set_mean(encodings)


def aggregate_max(encodings: Tensor) -> Tensor:
    _check_set(encodings)
    return set_max(encodings)


@dataclass
class AttentionParams:
    """Trainable query plus key/value projections.

    ``query`` is ``[d_key, heads]`` (no bias); ``key_weight`` is ``[d_key, d]``
    and ``value_weight`` is ``[d_value, d]``, each with a bias.
    """

    query: Tensor
    key_weight: Tensor
    key_bias: Tensor
    value_weight: Tensor
    value_bias: Tensor

    @property
    def heads(self) -> int:
        return self.query.shape[1]

    @property
    def d_key(self) -> int:
        return self.query.shape[0]

    @property
    def d_value(self) -> int:
        return self.value_weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.key_weight.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"query": self.query, "key.weight": self.key_weight, "key.bias": self.key_bias,
                "value.weight": self.value_weight, "value.bias": self.value_bias}

    @classmethod
    def init(cls, d: int, d_key: int, d_value: int, heads: int, rng: np.random.Generator,
             dtype=np.float32) -> "AttentionParams":
        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        return cls(query=uniform((d_key, heads), d_key),
                   key_weight=uniform((d_key, d), d),
                   key_bias=Tensor(np.zeros(d_key, dtype=dtype), requires_grad=True),
                   value_weight=uniform((d_value, d), d),
                   value_bias=Tensor(np.zeros(d_value, dtype=dtype), requires_grad=True))

    @staticmethod
    def count(d: int, d_key: int, d_value: int, heads: int) -> int:
        return d * d_key + d_key + d * d_value + d_value + d_key * heads


def _keys_values(encodings: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    _check_set(encodings)
    if encodings.shape[1] != params.d_in:
        raise ConfigurationError(
            f"encodings have width {encodings.shape[1]}, attention expects {params.d_in}")
    if params.key_weight.shape[0] != params.d_key:
        raise ConfigurationError("key projection and query disagree on d_key")
    keys = linear(encodings, params.key_weight, params.key_bias)
    values = linear(encodings, params.value_weight, params.value_bias)
    return keys, values


def _weights(keys: Tensor, params: AttentionParams) -> Tensor:
    logits = (keys @ params.query) * (1.0 / math.sqrt(params.d_key))   # [p, heads]
    return softmax(logits, axis=0)


def attention_weights(encodings: Tensor, params: AttentionParams) -> Tensor:
    """Per-head attention over the set, shaped ``[heads, p]``; rows sum to one."""
    keys, _ = _keys_values(encodings, params)
    return _weights(keys, params).T


def aggregate_attention(encodings: Tensor, params: AttentionParams) -> Tensor:
    """Attention-weighted average of value vectors, heads concatenated in order."""
    keys, values = _keys_values(encodings, params)
    pooled = set_weighted_sum(_weights(keys, params), values)   # [heads, d_value]
    return pooled.reshape(params.heads * params.d_value)
