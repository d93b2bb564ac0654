"""Relational Memory Core: attention over memory slots inside an LSTM-style gated update."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .attention import AttentionParams, AttentionTrace, attend_blocks, bind_attention, init_attention
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    matmul,
    mul,
    repeat_rows,
    reshape,
    sigmoid,
    split_cols,
    tanh,
)

GATE_STYLES = ("unit", "memory")
INIT_MODES = ("identity_padded", "random_normal")


@dataclass(frozen=True)
class RmcConfig:
    mem_slots: int = 4
    mem_size: int = 64
    num_heads: int = 2
    num_blocks: int = 1
    gate_style: str = "unit"
    use_output_gate: bool = False
    forget_bias: float = 1.0
    input_size: int = 16
    key_size: int | None = None
    mlp_layers: int = 2

    def __post_init__(self):
        for name in ("mem_slots", "mem_size", "num_heads", "num_blocks", "input_size", "mlp_layers"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.mem_size % self.num_heads:
            raise ContractError(f"mem_size {self.mem_size} not divisible by num_heads {self.num_heads}")
        if self.gate_style not in GATE_STYLES:
            raise ContractError(f"gate_style must be one of {GATE_STYLES}")
        if self.key_size is not None and self.key_size < 1:
            raise ContractError("key_size must be >= 1")

    @property
    def head_key_size(self) -> int:
        return self.key_size or self.mem_size // self.num_heads

    @property
    def total_units(self) -> int:
        return self.mem_slots * self.mem_size

    @property
    def output_size(self) -> int:
        return self.total_units

    @property
    def num_gates(self) -> int:
        return 3 if self.use_output_gate else 2

    @property
    def gate_width(self) -> int:
        return self.mem_size if self.gate_style == "unit" else 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RmcParams:
    input_proj: nn.Linear
    blocks: list[AttentionParams]
    gate_w: Tensor  # input_size x (gates * gate_width): W^f | W^i [| W^o]
    gate_u: Tensor  # mem_size x (gates * gate_width): U^f | U^i [| U^o]
    gate_b: Tensor  # 1 x (gates * gate_width)


@dataclass
class RmcState:
    memory: Tensor  # (B*N) x F
    hidden: Tensor  # (B*N) x F


def init_params(config: RmcConfig, rng: np.random.Generator) -> nn.Params:
    p: nn.Params = {}
    f = config.mem_size
    nn.init_linear(rng, p, "rmc.input_proj", config.input_size, f)
    for b in range(config.num_blocks):
        init_attention(rng, p, f"rmc.block{b}", f, config.num_heads, config.key_size, config.mlp_layers)
    width = config.num_gates * config.gate_width
    p["rmc.gate_w"] = rng.normal(0.0, 1.0 / np.sqrt(config.input_size), size=(config.input_size, width))
    p["rmc.gate_u"] = rng.normal(0.0, 1.0 / np.sqrt(f), size=(f, width))
    p["rmc.gate_b"] = np.zeros((1, width))
    return p


def bind_params(p: Mapping[str, Tensor], config: RmcConfig) -> RmcParams:
    return RmcParams(
        input_proj=nn.bind_linear(p, "rmc.input_proj"),
        blocks=[bind_attention(p, f"rmc.block{b}", config.num_heads) for b in range(config.num_blocks)],
        gate_w=p["rmc.gate_w"],
        gate_u=p["rmc.gate_u"],
        gate_b=p["rmc.gate_b"],
    )


def param_count(config: RmcConfig) -> int:
    """Scalar parameter count, enumerated from the layer shapes."""
    f, h, d = config.mem_size, config.num_heads, config.head_key_size
    proj = config.input_size * f + f
    block = 2 * f * h * d + f * f + config.mlp_layers * (f * f + f) + 4 * f
    g = config.num_gates * config.gate_width
    gates = config.input_size * g + f * g + g
    return proj + config.num_blocks * block + gates


def init_state(config: RmcConfig, mode: str = "identity_padded", seed: int | None = None,
               batch: int = 1) -> RmcState:
    n, f = config.mem_slots, config.mem_size
    if mode == "identity_padded":
        one = np.eye(n, f)
        m = np.tile(one, (batch, 1))
    elif mode == "random_normal":
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((batch * n, f))
    else:
        raise ContractError(f"init mode must be one of {INIT_MODES}, got {mode!r}")
    return RmcState(Tensor(m), Tensor(np.zeros((batch * n, f))))


def rmc_step(params: RmcParams, config: RmcConfig, state: RmcState, x_t: Tensor,
             keep_weights: bool = True, timestep: int = 0) -> tuple[Tensor, RmcState, AttentionTrace]:
    """Advance one timestep for a batch of ``x_t.rows`` sequences.

    Returns the flattened hidden matrix (``B x N*F``), the next state and the
    attention trace.
    """
    n, f = config.mem_slots, config.mem_size
    if x_t.cols != config.input_size:
        raise DimensionError(f"input width {x_t.cols} != input_size {config.input_size}")
    batch = x_t.rows
    if state.memory.shape != (batch * n, f) or state.hidden.shape != (batch * n, f):
        raise DimensionError(
            f"state shapes {state.memory.shape}/{state.hidden.shape} do not match "
            f"{batch} sequences of {n}x{f}"
        )
    x_row = nn.linear_apply(params.input_proj, x_t)
    attended, trace = attend_blocks(params.blocks, state.memory, x_row, config.num_blocks,
                                    batch=batch, keep_weights=keep_weights, timestep=timestep)

    from_input = repeat_rows(matmul(x_t, params.gate_w), n) if n > 1 else matmul(x_t, params.gate_w)
    pre = add(add(from_input, matmul(state.hidden, params.gate_u)), params.gate_b)
    gates = split_cols(pre, [config.gate_width] * config.num_gates)
    forget = sigmoid(add(gates[0], Tensor(np.full((1, 1), config.forget_bias))))
    inp = sigmoid(gates[1])
    memory = add(mul(state.memory, forget), mul(attended, inp))
    hidden = tanh(memory)
    if config.use_output_gate:
        hidden = mul(hidden, sigmoid(gates[2]))
    output = reshape(hidden, batch, n * f)
    return output, RmcState(memory, hidden), trace


def unroll(params: RmcParams, config: RmcConfig, state0: RmcState, inputs: Sequence[Tensor],
           keep_weights: bool = True) -> tuple[list[Tensor], RmcState, list[AttentionTrace]]:
    if len(inputs) < 1:
        raise ContractError("unroll needs at least one timestep")
    outputs, traces = [], []
    state = state0
    for t, x in enumerate(inputs):
        out, state, trace = rmc_step(params, config, state, x, keep_weights, timestep=t)
        outputs.append(out)
        traces.append(trace)
    return outputs, state, traces
