"""Single-layer LSTM used as the comparison core."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, add, matmul, mul, sigmoid, split_cols, tanh


@dataclass(frozen=True)
class LstmConfig:
    hidden_size: int = 128
    input_size: int = 16
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.hidden_size < 1 or self.input_size < 1:
            raise ContractError("hidden_size and input_size must be >= 1")

    @property
    def output_size(self) -> int:
        return self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LstmParams:
    w: Tensor  # input x 4H, gate order i | f | g | o
    u: Tensor  # H x 4H
    b: Tensor  # 1 x 4H
    forget_bias: float = 1.0

    @property
    def hidden_size(self) -> int:
        return self.u.rows


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def init_params(config: LstmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    H = config.hidden_size
    return {
        "lstm.w": rng.normal(0.0, 1.0 / np.sqrt(config.input_size), size=(config.input_size, 4 * H)),
        "lstm.u": rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, 4 * H)),
        "lstm.b": np.zeros((1, 4 * H)),
    }


def bind_params(p: Mapping[str, Tensor], config: LstmConfig) -> LstmParams:
    return LstmParams(p["lstm.w"], p["lstm.u"], p["lstm.b"], config.forget_bias)


def param_count(config: LstmConfig) -> int:
    H = config.hidden_size
    return 4 * H * (config.input_size + H + 1)


def init_state(config: LstmConfig, batch: int = 1) -> LstmState:
    z = np.zeros((batch, config.hidden_size))
    return LstmState(Tensor(z), Tensor(z.copy()))


def lstm_step(params: LstmParams, state: LstmState, x_t: Tensor) -> tuple[Tensor, LstmState]:
    H = params.hidden_size
    if x_t.cols != params.w.rows:
        raise DimensionError(f"input width {x_t.cols} != {params.w.rows}")
    if state.h.shape != (x_t.rows, H) or state.c.shape != (x_t.rows, H):
        raise DimensionError(f"state shapes {state.h.shape}/{state.c.shape} do not match ({x_t.rows}, {H})")
    pre = add(add(matmul(x_t, params.w), matmul(state.h, params.u)), params.b)
    i, f, g, o = split_cols(pre, [H] * 4)
    f = sigmoid(add(f, Tensor(np.full((1, 1), params.forget_bias))))
    c = add(mul(f, state.c), mul(sigmoid(i), tanh(g)))
    h = mul(sigmoid(o), tanh(c))
    return h, LstmState(h, c)


def lstm_unroll(params: LstmParams, state0: LstmState,
                inputs: Sequence[Tensor]) -> tuple[list[Tensor], LstmState]:
    if len(inputs) < 1:
        raise ContractError("unroll needs at least one timestep")
    outputs = []
    state = state0
    for x in inputs:
        out, state = lstm_step(params, state, x)
        outputs.append(out)
    return outputs, state
