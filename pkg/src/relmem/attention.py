"""Multi-head dot-product attention over memory slots.

A batch of ``B`` sequences is processed as stacked rows: memory is
``(B*N) x F`` and the appended inputs are ``(B*R) x F``. Keys and values come
from ``[memory; inputs]`` and queries from memory only, so each memory row
attends over its own sequence's ``N + R`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import nn
from .tensor import (
    DimensionError,
    ContractError,
    Tensor,
    add,
    concat,
    grouped_matmul,
    matmul,
    scale,
    softmax_rows,
    split_cols,
    take_rows,
    transpose,
)


@dataclass
class AttentionParams:
    """One attention block.

    Head ``k`` owns column block ``k`` of ``query``/``key`` (width
    ``key_size``) and of ``value`` (width ``F / num_heads``). Storing the
    heads side by side lets one matmul produce all projections.
    """

    query: Tensor  # F x (h*d)
    key: Tensor  # F x (h*d)
    value: Tensor  # F x F
    mlp: nn.Mlp
    ln1: nn.LayerNorm
    ln2: nn.LayerNorm
    num_heads: int

    def __post_init__(self):
        f = self.value.rows
        if f % self.num_heads:
            raise ContractError(f"memory size {f} not divisible by {self.num_heads} heads")
        if self.query.shape != self.key.shape or self.query.cols % self.num_heads:
            raise DimensionError(f"query {self.query.shape} / key {self.key.shape} mismatch")

    @property
    def mem_size(self) -> int:
        return self.value.rows

    @property
    def key_size(self) -> int:
        return self.query.cols // self.num_heads


@dataclass
class AttentionTrace:
    """Attention weights for one timestep.

    ``weights[block][head]`` is an array of shape ``(B, N, N + R)``.
    """

    weights: list[list[np.ndarray]] = field(default_factory=list)
    timestep: int = 0

    def as_array(self, seq: int = 0) -> np.ndarray:
        """``(blocks, heads, N, N+R)`` for one batch element."""
        return np.stack([np.stack([w[seq] for w in block]) for block in self.weights])


def init_attention(rng: np.random.Generator, params: nn.Params, prefix: str, mem_size: int,
                   num_heads: int, key_size: int | None = None, mlp_layers: int = 2) -> None:
    if mem_size % num_heads:
        raise ContractError(f"memory size {mem_size} not divisible by {num_heads} heads")
    d = key_size or mem_size // num_heads
    std = 1.0 / np.sqrt(mem_size)
    params[f"{prefix}.query"] = rng.normal(0.0, std, size=(mem_size, num_heads * d))
    params[f"{prefix}.key"] = rng.normal(0.0, std, size=(mem_size, num_heads * d))
    params[f"{prefix}.value"] = rng.normal(0.0, std, size=(mem_size, mem_size))
    nn.init_mlp(rng, params, f"{prefix}.mlp", [mem_size] * (mlp_layers + 1))
    nn.init_layer_norm(params, f"{prefix}.ln1", mem_size)
    nn.init_layer_norm(params, f"{prefix}.ln2", mem_size)


def bind_attention(p, prefix: str, num_heads: int) -> AttentionParams:
    return AttentionParams(
        query=p[f"{prefix}.query"],
        key=p[f"{prefix}.key"],
        value=p[f"{prefix}.value"],
        mlp=nn.bind_mlp(p, f"{prefix}.mlp"),
        ln1=nn.bind_layer_norm(p, f"{prefix}.ln1"),
        ln2=nn.bind_layer_norm(p, f"{prefix}.ln2"),
        num_heads=num_heads,
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, d_k: int,
                         groups: int = 1) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_k)) v, returning ``(output, weights)``.

    With ``groups > 1`` the rows of ``q``, ``k`` and ``v`` are split into
    that many consecutive blocks and block ``g`` of ``q`` only sees block
    ``g`` of ``k``/``v``.
    """
    if q.cols != d_k or k.cols != d_k:
        raise DimensionError(f"query {q.shape} / key {k.shape} widths must equal d_k={d_k}")
    if v.rows != k.rows:
        raise DimensionError(f"values {v.shape} and keys {k.shape} need the same row count")
    if groups == 1:
        scores = matmul(q, transpose(k))
    else:
        scores = grouped_matmul(q, k, groups, transpose_b=True)
    weights = softmax_rows(scale(scores, 1.0 / np.sqrt(d_k)))
    out = matmul(weights, v) if groups == 1 else grouped_matmul(weights, v, groups)
    return out, weights


@lru_cache(maxsize=64)
def _interleave(batch: int, slots: int, extra: int) -> np.ndarray:
    """Row order taking ``[all memory rows; all input rows]`` to per-sequence ``[M_b; x_b]`` blocks."""
    idx = np.empty(batch * (slots + extra), dtype=np.intp)
    for b in range(batch):
        base = b * (slots + extra)
        idx[base:base + slots] = np.arange(b * slots, (b + 1) * slots)
        idx[base + slots:base + slots + extra] = batch * slots + np.arange(b * extra, (b + 1) * extra)
    idx.setflags(write=False)
    return idx


def mhdpa_over_memory(params: AttentionParams, memory: Tensor, inputs: Tensor | None = None,
                      batch: int = 1, keep_weights: bool = True):
    """Attend from memory rows over ``[memory; inputs]``.

    Returns ``(M_tilde, weights)`` where ``M_tilde`` has memory's shape and
    ``weights`` is a list over heads of ``(batch, N, N + R)`` arrays (None
    when ``keep_weights`` is false). Weight columns list the sequence's
    memories first, then its input rows.
    """
    f = params.mem_size
    if memory.cols != f:
        raise DimensionError(f"memory width {memory.cols} != mem size {f}")
    if memory.rows % batch:
        raise DimensionError(f"{memory.rows} memory rows do not split into {batch} sequences")
    slots = memory.rows // batch
    if inputs is not None and inputs.rows:
        if inputs.cols != f:
            raise DimensionError(f"input rows have width {inputs.cols}, memory has {f}")
        if inputs.rows % batch:
            raise DimensionError(f"{inputs.rows} input rows do not split into {batch} sequences")
        extra = inputs.rows // batch
        mem_in = concat("rows", memory, inputs)
        if batch > 1:
            mem_in = take_rows(mem_in, _interleave(batch, slots, extra))
    else:
        extra = 0
        mem_in = memory

    h = params.num_heads
    d = params.key_size
    qs = split_cols(matmul(memory, params.query), [d] * h)
    ks = split_cols(matmul(mem_in, params.key), [d] * h)
    vs = split_cols(matmul(mem_in, params.value), [f // h] * h)
    outs, weights = [], []
    for q, k, v in zip(qs, ks, vs):
        o, w = scaled_dot_attention(q, k, v, d, batch)
        outs.append(o)
        if keep_weights:
            weights.append(w.data.reshape(batch, slots, slots + extra).copy())
    out = outs[0] if h == 1 else concat("cols", *outs)
    return out, (weights if keep_weights else None)


def attention_block(params: AttentionParams, memory: Tensor, inputs: Tensor | None,
                    batch: int = 1, keep_weights: bool = True):
    """Attention, residual + layer norm, row-wise MLP, residual + layer norm."""
    attended, weights = mhdpa_over_memory(params, memory, inputs, batch, keep_weights)
    y = nn.layer_norm_apply(params.ln1, add(memory, attended))
    out = nn.layer_norm_apply(params.ln2, add(y, nn.mlp_apply(params.mlp, y)))
    return out, weights


def attend_blocks(blocks: list[AttentionParams], memory: Tensor, inputs: Tensor | None,
                  num_blocks: int | None = None, batch: int = 1, keep_weights: bool = True,
                  timestep: int = 0) -> tuple[Tensor, AttentionTrace]:
    """Run ``num_blocks`` attention iterations, one parameter set per block."""
    n = len(blocks) if num_blocks is None else num_blocks
    if n < 1:
        raise ContractError("num_blocks must be >= 1")
    if n > len(blocks):
        raise ContractError(f"{n} blocks requested, {len(blocks)} parameter sets given")
    trace = AttentionTrace(timestep=timestep)
    for params in blocks[:n]:
        memory, weights = attention_block(params, memory, inputs, batch, keep_weights)
        if keep_weights:
            trace.weights.append(weights)
    return memory, trace
