"""Layers, losses and the optimizer used by the recurrent cores and heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, matmul, add, record, relu

Params = dict[str, np.ndarray]


@dataclass
class Linear:
    weight: Tensor  # in x out
    bias: Tensor | None = None  # 1 x out

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (1, self.weight.cols):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.rows

    @property
    def out_dim(self) -> int:
        return self.weight.cols


def linear_apply(layer: Linear, x: Tensor) -> Tensor:
    if x.cols != layer.in_dim:
        raise DimensionError(f"linear expects {layer.in_dim} input columns, got {x.shape}")
    y = matmul(x, layer.weight)
    if layer.bias is not None:
        y = add(y, layer.bias)
    return y


@dataclass
class Mlp:
    layers: list[Linear]
    activate_last: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ContractError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}")


def mlp_apply(mlp: Mlp, x: Tensor) -> Tensor:
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        x = linear_apply(layer, x)
        if i < last or mlp.activate_last:
            x = relu(x)
    return x


@dataclass
class LayerNorm:
    gain: Tensor  # 1 x F
    offset: Tensor  # 1 x F
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("layer norm epsilon must be positive")


def layer_norm_apply(ln: LayerNorm, x: Tensor) -> Tensor:
    if x.cols != ln.gain.cols:
        raise DimensionError(f"layer norm over {ln.gain.cols} features, got {x.shape}")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + ln.epsilon)
    xhat = xc * inv
    G, B = ln.gain.data, ln.offset.data

    def back(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return record(xhat * G + B, (x, ln.gain, ln.offset), back)


def softmax_xent(logits: Tensor, targets: Sequence[int] | np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target]."""
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    if t.shape[0] != logits.rows:
        raise ContractError(f"{t.shape[0]} targets for {logits.rows} rows")
    if t.size and (t.min() < 0 or t.max() >= logits.cols):
        raise ContractError(f"target index out of range [0, {logits.cols})")
    Z = logits.data
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(t.size)
    loss = -logp[rows, t].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g[0, 0] / t.size),)

    return record(np.array([[loss]]), (logits,), back)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}
    return dict(grads)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ContractError(f"params and grads keyed differently: {missing}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1.0 - b2) * g * g
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(state.lr, b1, b2, state.epsilon, step, new_m, new_v)


# ---------------------------------------------------------------- parameter init / binding


def init_linear(rng: np.random.Generator, params: Params, prefix: str, n_in: int, n_out: int,
                bias: bool = True, gain: float = 1.0) -> None:
    """Fill ``params`` with a fan-in scaled normal weight and a zero bias."""
    params[f"{prefix}.w"] = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))
    if bias:
        params[f"{prefix}.b"] = np.zeros((1, n_out))


def init_mlp(rng: np.random.Generator, params: Params, prefix: str, sizes: Sequence[int],
             final_gain: float = 1.0) -> None:
    last = len(sizes) - 2
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        g = final_gain if i == last else np.sqrt(2.0)
        init_linear(rng, params, f"{prefix}.{i}", a, b, gain=g)


def init_layer_norm(params: Params, prefix: str, width: int) -> None:
    params[f"{prefix}.gain"] = np.ones((1, width))
    params[f"{prefix}.offset"] = np.zeros((1, width))


def bind_linear(p: Mapping[str, Tensor], prefix: str) -> Linear:
    return Linear(p[f"{prefix}.w"], p.get(f"{prefix}.b"))


def bind_mlp(p: Mapping[str, Tensor], prefix: str, activate_last: bool = False) -> Mlp:
    layers = []
    i = 0
    while f"{prefix}.{i}.w" in p:
        layers.append(bind_linear(p, f"{prefix}.{i}"))
        i += 1
    return Mlp(layers, activate_last)


def bind_layer_norm(p: Mapping[str, Tensor], prefix: str, epsilon: float = 1e-5) -> LayerNorm:
    return LayerNorm(p[f"{prefix}.gain"], p[f"{prefix}.offset"], epsilon)


def as_tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap arrays as untracked tensors (inference without a tape)."""
    return {k: Tensor(v, name=k) for k, v in params.items()}


def count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))
