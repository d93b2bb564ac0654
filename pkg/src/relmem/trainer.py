"""Training, evaluation and gradient checking for RMC / LSTM cores on the toy tasks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from . import baseline, nn, rmc, tasks
from .tensor import ContractError, Tape, Tensor, backward, concat, finite_diff_grad, max_relative_error, mul, sum_all

log = logging.getLogger(__name__)

MODELS = ("rmc", "lstm")
METRIC_COLUMNS = ("step", "loss", "batch_accuracy", "best_batch_accuracy", "wall_seconds")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "rmc"
    task: str = "nth_farthest"
    # task
    dim: int = 4
    seq_len: int = 4
    vocab: int = 10
    length: int = 5
    # rmc
    mem_slots: int = 4
    mem_size: int = 64
    num_heads: int = 2
    num_blocks: int = 1
    gate_style: str = "unit"
    use_output_gate: bool = False
    forget_bias: float = 1.0
    key_size: int | None = None
    init_mode: str = "identity_padded"
    # lstm
    hidden_size: int = 128
    # output head
    head_layers: int = 4
    head_units: int = 256
    # optimisation
    lr: float = 1e-4
    batch: int = 64
    steps: int = 20000
    clip: float = 1.0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError("model", f"must be one of {MODELS}, got {self.model!r}")
        if self.task not in tasks.TASKS:
            raise ConfigError("task", f"must be one of {tasks.TASKS}, got {self.task!r}")
        for name in ("dim", "vocab", "length", "mem_slots", "mem_size", "num_heads", "num_blocks",
                     "hidden_size", "head_layers", "head_units", "batch", "eval_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("steps", f"must be an integer >= 0, got {self.steps!r}")
        if not isinstance(self.seq_len, int) or self.seq_len < 2:
            raise ConfigError("seq_len", f"must be an integer >= 2, got {self.seq_len!r}")
        if self.vocab < 2:
            raise ConfigError("vocab", "must be >= 2")
        if not isinstance(self.lr, (int, float)) or not self.lr > 0 or not math.isfinite(self.lr):
            raise ConfigError("lr", f"must be a positive number, got {self.lr!r}")
        if not isinstance(self.clip, (int, float)) or not self.clip > 0:
            raise ConfigError("clip", f"must be a positive number, got {self.clip!r}")
        if self.mem_size % self.num_heads:
            raise ConfigError("num_heads", f"must divide mem_size={self.mem_size}")
        if self.gate_style not in rmc.GATE_STYLES:
            raise ConfigError("gate_style", f"must be one of {rmc.GATE_STYLES}")
        if self.init_mode not in rmc.INIT_MODES:
            raise ConfigError("init_mode", f"must be one of {rmc.INIT_MODES}")
        if self.key_size is not None and (not isinstance(self.key_size, int) or self.key_size < 1):
            raise ConfigError("key_size", "must be null or an integer >= 1")
        if not isinstance(self.seed, int):
            raise ConfigError("seed", "must be an integer")

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def input_size(self) -> int:
        if self.task == "nth_farthest":
            return tasks.nth_farthest_width(self.dim, self.seq_len)
        return tasks.memorization_width(self.vocab)

    @property
    def num_classes(self) -> int:
        return self.seq_len if self.task == "nth_farthest" else self.vocab

    def core_config(self):
        if self.model == "rmc":
            return rmc.RmcConfig(
                mem_slots=self.mem_slots, mem_size=self.mem_size, num_heads=self.num_heads,
                num_blocks=self.num_blocks, gate_style=self.gate_style,
                use_output_gate=self.use_output_gate, forget_bias=self.forget_bias,
                input_size=self.input_size, key_size=self.key_size,
            )
        return baseline.LstmConfig(hidden_size=self.hidden_size, input_size=self.input_size,
                                   forget_bias=self.forget_bias)


@dataclass
class MetricsRow:
    step: int
    loss: float
    batch_accuracy: float
    best_batch_accuracy: float
    wall_seconds: float


@dataclass
class Batch:
    inputs: list[np.ndarray]  # T arrays of batch x width
    targets: np.ndarray  # supervised class per row of the stacked logits
    answer_steps: list[int]  # timesteps whose outputs feed the head, in stacking order


class Model:
    """A recurrent core followed by an MLP head, shared by both core kinds."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.core = config.core_config()

    def init_params(self, rng: np.random.Generator) -> nn.Params:
        c = self.config
        if c.model == "rmc":
            p = rmc.init_params(self.core, rng)
        else:
            p = baseline.init_params(self.core, rng)
        sizes = [self.core.output_size] + [c.head_units] * c.head_layers + [c.num_classes]
        nn.init_mlp(rng, p, "head", sizes, final_gain=0.1)
        return p

    def core_outputs(self, bound: Mapping[str, Tensor], inputs: list[np.ndarray],
                     keep_weights: bool = False):
        """Per-timestep core outputs (``batch x output_size``) and attention traces (RMC only)."""
        xs = [Tensor(x) for x in inputs]
        batch = xs[0].rows
        if self.config.model == "rmc":
            params = rmc.bind_params(bound, self.core)
            state = rmc.init_state(self.core, self.config.init_mode, seed=self.config.seed, batch=batch)
            outputs, _, traces = rmc.unroll(params, self.core, state, xs, keep_weights=keep_weights)
            return outputs, traces
        params = baseline.bind_params(bound, self.core)
        outputs, _ = baseline.lstm_unroll(params, baseline.init_state(self.core, batch), xs)
        return outputs, None

    def logits(self, bound: Mapping[str, Tensor], batch: Batch, keep_weights: bool = False):
        outputs, traces = self.core_outputs(bound, batch.inputs, keep_weights)
        picked = [outputs[t] for t in batch.answer_steps]
        stacked = picked[0] if len(picked) == 1 else concat("rows", *picked)
        head = nn.bind_mlp(bound, "head")
        return nn.mlp_apply(head, stacked), traces


def make_batch(config: TrainConfig, rng: np.random.Generator, batch_size: int | None = None) -> Batch:
    b = batch_size or config.batch
    if config.task == "nth_farthest":
        inputs, targets, _ = tasks.nth_farthest_batch(rng, b, config.dim, config.seq_len)
        return Batch(inputs, targets, [len(inputs) - 1])
    inputs, targets, mask, _ = tasks.memorization_batch(rng, config.task, b, config.vocab, config.length)
    answer = [t for t in range(len(inputs)) if mask[t].all()]
    return Batch(inputs, np.concatenate([targets[t] for t in answer]), answer)


def batch_from_episodes(config: TrainConfig, episodes: list) -> Batch:
    if config.task == "nth_farthest":
        enc = [tasks.encode_nth_farthest(e) for e in episodes]
        x = np.stack([e[0] for e in enc], axis=1)
        return Batch(list(x), np.array([e[1] for e in enc], dtype=np.intp), [x.shape[0] - 1])
    enc = [tasks.encode_memorization(s, config.vocab) for s in episodes]
    x = np.stack([e[0] for e in enc], axis=1)
    targets = np.stack([e[1] for e in enc], axis=1)
    mask = np.stack([e[2] for e in enc], axis=1)
    answer = [t for t in range(x.shape[0]) if mask[t].all()]
    return Batch(list(x), np.concatenate([targets[t] for t in answer]), answer)


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def initial_loss(config: TrainConfig, batch_size: int | None = None) -> float:
    """Loss of a freshly initialised model on one batch."""
    init_rng, data_rng = _rngs(config.seed)
    model = Model(config)
    params = model.init_params(init_rng)
    batch = make_batch(config, data_rng, batch_size)
    logits, _ = model.logits(nn.as_tensors(params), batch)
    return nn.softmax_xent(logits, batch.targets).item()


def train(
    config: TrainConfig,
    clock: Callable[[], float] = time.perf_counter,
    on_metrics: Callable[[MetricsRow], bool | None] | None = None,
) -> tuple[list[MetricsRow], dict]:
    """Train from scratch. Returns the metrics history and a checkpoint dict.

    ``on_metrics`` sees every recorded row; returning True ends the run
    after that step.
    """
    config.validate()
    init_rng, data_rng = _rngs(config.seed)
    model = Model(config)
    params = model.init_params(init_rng)
    opt = nn.AdamState(lr=config.lr)
    history: list[MetricsRow] = []
    best = 0.0
    start = clock()
    step = 0
    for step in range(1, config.steps + 1):
        batch = make_batch(config, data_rng)
        tape = Tape()
        bound = tape.bind(params)
        logits, _ = model.logits(bound, batch)
        loss = nn.softmax_xent(logits, batch.targets)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingError(f"non-finite loss {loss_value} at step {step}")
        leaf_grads = backward(loss, tape)
        grads = nn.clip_global_norm({k: leaf_grads[t] for k, t in bound.items()}, config.clip)
        params, opt = nn.adam_step(params, grads, opt)
        if step % config.eval_every == 0 or step == config.steps:
            acc = accuracy(logits.data, batch.targets)
            best = max(best, acc)
            row = MetricsRow(step, loss_value, acc, best, clock() - start)
            history.append(row)
            if on_metrics is not None and on_metrics(row):
                break
    ckpt = make_checkpoint(config, params, opt, data_rng, step if config.steps else 0)
    return history, ckpt


# ---------------------------------------------------------------- checkpoints

FORMAT_VERSION = 1


def make_checkpoint(config: TrainConfig, params: nn.Params, opt: nn.AdamState,
                    rng: np.random.Generator, step: int) -> dict:
    def pack(d):
        return {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in d.items()}

    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "params": pack(params),
        "optimizer": {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon,
            "step": opt.step, "m": pack(opt.m), "v": pack(opt.v),
        },
        "rng_state": rng.bit_generator.state,
    }


def unpack_arrays(d: Mapping) -> nn.Params:
    return {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def read_checkpoint(ckpt: Mapping) -> tuple[TrainConfig, nn.Params, nn.AdamState]:
    if ckpt.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format_version {ckpt.get('format_version')!r}")
    config = TrainConfig.from_dict(ckpt["config"])
    params = unpack_arrays(ckpt["params"])
    o = ckpt["optimizer"]
    opt = nn.AdamState(o["lr"], o["beta1"], o["beta2"], o["epsilon"], o["step"],
                       unpack_arrays(o["m"]), unpack_arrays(o["v"]))
    return config, params, opt


def evaluate(ckpt: Mapping, num_batches: int, task: str | None = None, seed: int = 12345,
             batch_size: int | None = None) -> float:
    """Accuracy on fresh data: final-step answers (Nth Farthest) or per character (memorization)."""
    config, params, _ = read_checkpoint(ckpt)
    if task is not None and task != config.task:
        raise ContractError(f"checkpoint was trained on {config.task!r}, not {task!r}")
    if num_batches < 1:
        raise ContractError("num_batches must be >= 1")
    model = Model(config)
    bound = nn.as_tensors(params)
    rng = np.random.default_rng(seed)
    hits = total = 0
    for _ in range(num_batches):
        batch = make_batch(config, rng, batch_size)
        logits, _ = model.logits(bound, batch)
        hits += int(np.sum(np.argmax(logits.data, axis=1) == batch.targets))
        total += batch.targets.size
    return hits / total


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    num_params: int
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check_model(model: str = "rmc", gate_style: str = "unit", num_blocks: int = 1,
                     mem_slots: int = 2, mem_size: int = 8, num_heads: int = 2, hidden_size: int = 8,
                     input_size: int = 4, steps: int = 3, batch: int = 2, use_output_gate: bool = False,
                     eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients with central differences on a small model.

    The loss is a fixed random weighting of all core outputs over a
    ``steps``-long unroll, with a batch of ``batch`` sequences.
    """
    rng = np.random.default_rng(seed)
    if model == "rmc":
        cfg = rmc.RmcConfig(mem_slots=mem_slots, mem_size=mem_size, num_heads=num_heads,
                            num_blocks=num_blocks, gate_style=gate_style, input_size=input_size,
                            use_output_gate=use_output_gate)
        params = rmc.init_params(cfg, rng)
        # layer-norm gains/offsets off their identity values so their gradients are generic
        for k in params:
            if k.endswith((".gain", ".offset", "gate_b", ".b")):
                params[k] = params[k] + rng.normal(0.0, 0.1, size=params[k].shape)
        state_m = rng.normal(0.0, 1.0, size=(batch * mem_slots, mem_size))
    elif model == "lstm":
        cfg = baseline.LstmConfig(hidden_size=hidden_size, input_size=input_size)
        params = baseline.init_params(cfg, rng)
        params["lstm.b"] = rng.normal(0.0, 0.1, size=params["lstm.b"].shape)
    else:
        raise ContractError(f"unknown model {model!r}")
    n = nn.count(params)
    if n > 20000:
        raise ContractError(f"gradient check limited to 20000 parameters, got {n}")
    xs = [rng.normal(0.0, 1.0, size=(batch, input_size)) for _ in range(steps)]
    weights = [rng.normal(0.0, 1.0, size=(batch, cfg.output_size)) for _ in range(steps)]

    def loss_fn(bound):
        inputs = [Tensor(x) for x in xs]
        if model == "rmc":
            state = rmc.RmcState(Tensor(state_m), Tensor(np.zeros_like(state_m)))
            outs, _, _ = rmc.unroll(rmc.bind_params(bound, cfg), cfg, state, inputs, keep_weights=False)
        else:
            outs, _ = baseline.lstm_unroll(baseline.bind_params(bound, cfg),
                                           baseline.init_state(cfg, batch), inputs)
        total = None
        for o, w in zip(outs, weights):
            term = sum_all(mul(o, Tensor(w)))
            total = term if total is None else total + term
        return total

    tape = Tape()
    bound = tape.bind(params)
    leaf = backward(loss_fn(bound), tape)
    analytic = {k: leaf[t] for k, t in bound.items()}
    numeric = finite_diff_grad(lambda p: loss_fn(nn.as_tensors(p)).item(), params, eps)
    per = {k: max_relative_error({k: analytic[k]}, {k: numeric[k]}) for k in params}
    worst = max(per.values())
    return GradCheckReport(worst, worst < tol, n, tol, per)
