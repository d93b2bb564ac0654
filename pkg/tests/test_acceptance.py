"""Acceptance criteria 1 to 8.

Each test prints a single ``CRITERION n: PASS|FAIL`` line (collected into the
pytest terminal summary as well) and then asserts the verdict. Tolerances and
budgets are the pinned ones; nothing here is relaxed to make a run green.

The two learning criteria (5 and 6) train real models and take tens of CPU
minutes. Run only them with ``pytest -m slow tests/test_acceptance.py``, or
skip them with ``-m "not slow"``.
"""

from __future__ import annotations

import csv
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from relmem import baseline, nn, rmc, tasks, trainer
from relmem.attention import attend_blocks, mhdpa_over_memory
from relmem.cli import main, save_json, write_metrics
from relmem.rmc import RmcConfig, RmcState, param_count, rmc_step
from relmem.tensor import Tensor
from relmem.trainer import TrainConfig


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    errors = {}
    for gate_style in ("unit", "memory"):
        for blocks in (1, 2):
            r = trainer.grad_check_model("rmc", gate_style, blocks, mem_slots=2, mem_size=8, num_heads=2,
                                         eps=1e-5, tol=1e-4)
            errors[f"rmc/{gate_style}/blocks={blocks}"] = r.max_relative_error
    errors["lstm"] = trainer.grad_check_model("lstm", eps=1e-5, tol=1e-4).max_relative_error
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    verdict(1, worst < 1e-4 and elapsed < 120,
            f"max rel err {worst:.2e} over {len(errors)} checks (< 1e-4), {elapsed:.1f}s (< 120s)")


# ---------------------------------------------------------------- 2


def _structural_violations(rng: np.random.Generator) -> list[str]:
    n_slots = int(rng.integers(1, 7))
    heads = int(rng.choice([1, 2, 4]))
    f = heads * int(rng.integers(1, 5))
    blocks = int(rng.integers(1, 4))
    batch = int(rng.integers(1, 4))
    gate_style = str(rng.choice(["unit", "memory"]))
    width = int(rng.integers(1, 6))
    cfg = RmcConfig(mem_slots=n_slots, mem_size=f, num_heads=heads, num_blocks=blocks,
                    gate_style=gate_style, input_size=width)
    p = rmc.init_params(cfg, rng)
    params = rmc.bind_params(nn.as_tensors(p), cfg)
    mem = rng.normal(size=(batch * n_slots, f))
    hidden = rng.normal(size=(batch * n_slots, f))
    x = rng.normal(size=(batch, width))
    tag = f"N={n_slots} F={f} h={heads} blocks={blocks} B={batch} {gate_style}"
    bad = []

    # shape preservation and query exclusion, per block
    xp = nn.linear_apply(params.input_proj, Tensor(x))
    out, trace = attend_blocks(params.blocks, Tensor(mem), xp, blocks, batch=batch)
    if out.shape != mem.shape:
        bad.append(f"{tag}: output shape {out.shape}")
    w = np.stack([trace.as_array(b) for b in range(batch)])
    if w.shape != (batch, blocks, heads, n_slots, n_slots + 1):
        bad.append(f"{tag}: weight shape {w.shape}")
    if np.max(np.abs(w.sum(axis=-1) - 1.0)) > 1e-9 or np.any(w < 0):
        bad.append(f"{tag}: rows not stochastic")

    # head-zeroing locality on a single attention pass
    if heads > 1:
        k = int(rng.integers(heads))
        dv = f // heads
        full, _ = mhdpa_over_memory(params.blocks[0], Tensor(mem), xp, batch=batch)
        zeroed = dict(p)
        zeroed["rmc.block0.value"] = p["rmc.block0.value"].copy()
        zeroed["rmc.block0.value"][:, k * dv:(k + 1) * dv] = 0.0
        zparams = rmc.bind_params(nn.as_tensors(zeroed), cfg)
        part, _ = mhdpa_over_memory(zparams.blocks[0], Tensor(mem), xp, batch=batch)
        keep = np.ones(f, bool)
        keep[k * dv:(k + 1) * dv] = False
        if np.any(part.data[:, ~keep] != 0.0) or not np.array_equal(part.data[:, keep], full.data[:, keep]):
            bad.append(f"{tag}: head zeroing leaked")

    # per-row constancy of memory gates: the update is f_row * M + i_row * M_tilde
    state = RmcState(Tensor(mem), Tensor(hidden))
    _, nxt, _ = rmc_step(params, cfg, state, Tensor(x))
    if gate_style == "memory":
        pre = np.repeat(x @ p["rmc.gate_w"], n_slots, axis=0) + hidden @ p["rmc.gate_u"] + p["rmc.gate_b"]
        sig = lambda z: 1 / (1 + np.exp(-z))
        expected = sig(pre[:, :1] + cfg.forget_bias) * mem + sig(pre[:, 1:2]) * out.data
        if not np.allclose(nxt.memory.data, expected, rtol=1e-10, atol=1e-12):
            bad.append(f"{tag}: memory gate not constant per row")

    # gate limit: forget -> 1, input -> 0 leaves memory unchanged
    frozen_cfg = RmcConfig(**{**cfg.to_dict(), "forget_bias": 1e6})
    q = dict(p)
    q["rmc.gate_b"] = p["rmc.gate_b"].copy()
    q["rmc.gate_b"][0, cfg.gate_width:2 * cfg.gate_width] = -1e6
    _, frozen, _ = rmc_step(rmc.bind_params(nn.as_tensors(q), frozen_cfg), frozen_cfg, state, Tensor(x))
    if not np.array_equal(frozen.memory.data, mem):
        bad.append(f"{tag}: memory moved at the gate limit")
    return bad


def test_criterion_2_structural_invariants():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    configs = 60
    bad = [v for _ in range(configs) for v in _structural_violations(rng)]
    elapsed = time.perf_counter() - start
    detail = f"{configs} random configs, {len(bad)} violations, {elapsed:.1f}s (< 60s)"
    if bad:
        detail += "; first: " + bad[0]
    verdict(2, not bad and elapsed < 60, detail)


# ---------------------------------------------------------------- 3


def test_criterion_3_param_count_invariance():
    rows = []
    for f, h, blocks, gate_style in [(64, 2, 1, "unit"), (32, 4, 2, "memory"), (8, 2, 3, "unit")]:
        counts = set()
        for n in (1, 2, 4, 8, 16):
            cfg = RmcConfig(mem_slots=n, mem_size=f, num_heads=h, num_blocks=blocks, gate_style=gate_style,
                            input_size=16)
            actual = sum(a.size for a in rmc.init_params(cfg, np.random.default_rng(n)).values())
            counts.add(param_count(cfg))
            counts.add(actual)
        rows.append((f, h, blocks, counts))
    ok = all(len(c) == 1 for *_, c in rows)
    verdict(3, ok, "; ".join(f"F={f} h={h} blocks={b}: {sorted(c)}" for f, h, b, c in rows))


# ---------------------------------------------------------------- 4


def _brute_nth_farthest(vectors, labels, n, m):
    ref = None
    for v, label in zip(vectors, labels):
        if label == m:
            ref = v
    ranked = []
    for v, label in zip(vectors, labels):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(v, ref)))
        ranked.append((-d, int(label)))
    ranked.sort()
    return ranked[n - 1][1]


def _brute_memorization(kind, tokens):
    tokens = list(tokens)
    if kind == "copy":
        return tokens
    if kind == "reverse":
        return [tokens[len(tokens) - 1 - i] for i in range(len(tokens))]
    return tokens + tokens


def test_criterion_4_task_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    nf_ok = sum(
        ep.target == _brute_nth_farthest(ep.vectors.tolist(), ep.labels.tolist(), ep.n, ep.m)
        for ep in (tasks.gen_nth_farthest(rng, 16, 8) for _ in range(10_000))
    )
    kinds = ["copy", "reverse", "double"]
    mem_ok = 0
    for i in range(10_000):
        s = tasks.gen_memorization(rng, kinds[i % 3], 10, 5)
        mem_ok += s.target_tokens == _brute_memorization(s.kind, s.input_tokens)
    elapsed = time.perf_counter() - start
    verdict(4, nf_ok == 10_000 and mem_ok == 10_000 and elapsed < 60,
            f"nth_farthest {nf_ok}/10000, memorization {mem_ok}/10000, {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------- 7


def test_criterion_7_initial_loss():
    losses = [trainer.initial_loss(TrainConfig(dim=16, seq_len=8, seed=s, steps=0), batch_size=64)
              for s in range(3)]
    verdict(7, all(1.8 <= v <= 2.4 for v in losses),
            f"untrained losses {[round(v, 4) for v in losses]} in [1.8, 2.4], ln 8 = {math.log(8):.4f}")


# ---------------------------------------------------------------- 8

SMALL = dict(dim=3, seq_len=4, mem_slots=3, mem_size=8, num_heads=2, num_blocks=2, head_layers=1,
             head_units=16, batch=8, steps=5)


def test_criterion_8_determinism_and_io(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(SMALL))
    runs = [tmp_path / "a", tmp_path / "b"]
    for out in runs:
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0

    def rows(out):
        return [{k: v for k, v in r.items() if k != "wall_seconds"}
                for r in csv.DictReader(open(out / "metrics.csv"))]

    metrics_same = rows(runs[0]) == rows(runs[1])
    ckpt_same = (runs[0] / "checkpoint.json").read_bytes() == (runs[1] / "checkpoint.json").read_bytes()

    # with a fixed clock the whole file is byte-identical, wall column included
    def csv_bytes():
        ticks = iter(range(10**6))
        history, _ = trainer.train(TrainConfig(**SMALL), clock=lambda: next(ticks) * 0.5)
        path = tmp_path / "fixed.csv"
        write_metrics(path, history)
        return path.read_bytes()

    fixed_clock_same = csv_bytes() == csv_bytes()

    original = (runs[0] / "checkpoint.json").read_bytes()
    ckpt = json.loads(original)
    config, params, opt = trainer.read_checkpoint(ckpt)
    rebuilt = trainer.make_checkpoint(config, params, opt, np.random.default_rng(), ckpt["step"])
    rebuilt["rng_state"] = ckpt["rng_state"]
    save_json(tmp_path / "again.json", rebuilt)
    round_trip = (tmp_path / "again.json").read_bytes() == original

    eps = tmp_path / "eps.jsonl"
    main(["gen", "--task", "nth_farthest", "--count", "2", "--dim", "3", "--seq-len", "4", "--out", str(eps)])
    dumps = [tmp_path / "d1.json", tmp_path / "d2.json"]
    for d in dumps:
        main(["dump-attention", "--checkpoint", str(runs[0] / "checkpoint.json"), "--episodes", str(eps),
              "--out", str(d)])
    att = np.array(json.loads(dumps[0].read_text())["attention"])
    shape_ok = att.shape == (4, 2, 2, 3, 4)
    row_err = float(np.max(np.abs(att.sum(axis=-1) - 1.0)))
    dump_same = dumps[0].read_bytes() == dumps[1].read_bytes()

    ok = all([metrics_same, ckpt_same, fixed_clock_same, round_trip, shape_ok, row_err <= 1e-9, dump_same])
    verdict(8, ok, f"metrics equal {metrics_same} (wall_seconds excluded; fixed clock bytes {fixed_clock_same}), "
                   f"checkpoint rerun {ckpt_same}, round-trip {round_trip}, dump shape {att.shape} "
                   f"row err {row_err:.1e}, dump rerun {dump_same}")


# ---------------------------------------------------------------- 5, 6 (training)


def _train_budgeted(config: TrainConfig, stop):
    """Train with early stopping; returns (history, checkpoint, cpu_seconds)."""
    cpu0 = time.process_time()
    history, ckpt = trainer.train(config, on_metrics=stop)
    return history, ckpt, time.process_time() - cpu0


def _matched_lstm_hidden(target: int, input_size: int) -> int:
    return min(range(8, 512), key=lambda h: abs(baseline.param_count(
        baseline.LstmConfig(hidden_size=h, input_size=input_size)) - target))


@pytest.mark.slow
def test_criterion_5_nth_farthest_learning():
    common = dict(task="nth_farthest", dim=4, seq_len=4, batch=64, lr=1e-4, steps=20_000)
    rmc_cfg = TrainConfig(model="rmc", mem_slots=4, mem_size=64, num_heads=2, num_blocks=1, **common)
    history, _, cpu = _train_budgeted(rmc_cfg, lambda r: r.best_batch_accuracy >= 0.90)
    best = history[-1].best_batch_accuracy
    rmc_params = param_count(rmc_cfg.core_config())

    hidden = _matched_lstm_hidden(rmc_params, rmc_cfg.input_size)
    lstm_cfg = TrainConfig(model="lstm", hidden_size=hidden, **common)
    lstm_hist, _, lstm_cpu = _train_budgeted(lstm_cfg, lambda r: r.best_batch_accuracy >= 0.90)
    lstm_best = lstm_hist[-1].best_batch_accuracy
    lstm_params = baseline.param_count(lstm_cfg.core_config())
    ordering = "RMC >= LSTM" if best >= lstm_best else "RMC < LSTM"
    detail = (f"RMC best_batch_accuracy {best:.4f} (>= 0.90) at step {history[-1].step}/20000, "
              f"{cpu / 60:.1f} CPU-min (<= 30), core params {rmc_params}; "
              f"LSTM(hidden={hidden}, core params {lstm_params}) best {lstm_best:.4f} in "
              f"{lstm_cpu / 60:.1f} CPU-min; ordering {ordering} (logged only)")
    verdict(5, best >= 0.90 and cpu <= 30 * 60, detail)


MEMO_THRESHOLDS = {"copy": 0.99, "reverse": 0.99, "double": 0.95}


@pytest.mark.slow
@pytest.mark.parametrize("task", list(MEMO_THRESHOLDS))
def test_criterion_6_memorization_learning(task):
    threshold = MEMO_THRESHOLDS[task]
    cfg = TrainConfig(model="rmc", task=task, vocab=10, length=5, batch=64, lr=1e-3, steps=10_000)
    window: list[float] = []

    def stop(row):
        # the trailing mean over fresh training batches is an unbiased early estimate;
        # the verdict below is measured separately on held-out batches
        window.append(row.batch_accuracy)
        del window[:-200]
        return len(window) == 200 and sum(window) / 200 >= threshold + 0.005

    history, ckpt, cpu = _train_budgeted(cfg, stop)
    acc = trainer.evaluate(ckpt, num_batches=50, seed=6)
    verdict(6, acc >= threshold and cpu <= 30 * 60,
            f"{task}: per-character accuracy {acc:.4f} (>= {threshold}) on 50 fresh batches after "
            f"{history[-1].step}/10000 steps, {cpu / 60:.1f} CPU-min (<= 30)")
