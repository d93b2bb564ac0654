"""Command-line interface: train, eval, gen, dump-attention, gradcheck, sweep."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import nn, tasks, trainer
from .tensor import ContractError
from .trainer import ConfigError, TrainConfig

log = logging.getLogger("relmem")


class CliError(Exception):
    pass


def _task_name(name: str) -> str:
    task = name.replace("-", "_")
    if task not in tasks.TASKS:
        raise CliError(f"unknown task {name!r}; expected one of {', '.join(tasks.TASKS)}")
    return task


# ---------------------------------------------------------------- file I/O


def save_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj) + "\n")


def load_checkpoint(path: Path) -> dict:
    try:
        ckpt = json.loads(Path(path).read_text())
        trainer.read_checkpoint(ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from None
    return ckpt


def write_metrics(path: Path, history: list[trainer.MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trainer.METRIC_COLUMNS)
        for r in history:
            w.writerow([r.step, repr(r.loss), repr(r.batch_accuracy), repr(r.best_batch_accuracy),
                        f"{r.wall_seconds:.3f}"])


def load_config(path: Path, seed: int | None = None) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if "task" in raw and isinstance(raw["task"], str):
        raw["task"] = raw["task"].replace("-", "_")
    return TrainConfig.from_dict(raw)


def run_training(config: TrainConfig, out: Path) -> list[trainer.MetricsRow]:
    every = max(1, config.steps // 20)

    def progress(row):
        if row.step % every == 0:
            log.info("step %d loss %.4f acc %.3f best %.3f", row.step, row.loss,
                     row.batch_accuracy, row.best_batch_accuracy)

    history, ckpt = trainer.train(config, on_metrics=progress)
    out.mkdir(parents=True, exist_ok=True)
    save_json(out / "resolved-config.json", config.to_dict())
    write_metrics(out / "metrics.csv", history)
    save_json(out / "checkpoint.json", ckpt)
    return history


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = load_config(args.config, args.seed)
    history = run_training(config, Path(args.out))
    if history:
        print(f"best_batch_accuracy={history[-1].best_batch_accuracy!r}")
    return 0


def cmd_eval(args) -> int:
    if args.batches < 1:
        raise CliError("--batches must be >= 1")
    task = _task_name(args.task) if args.task else None
    ckpt = load_checkpoint(args.checkpoint)
    acc = trainer.evaluate(ckpt, args.batches, task=task, seed=args.seed)
    print(f"accuracy={acc!r}")
    return 0


def cmd_gen(args) -> int:
    task = _task_name(args.task)
    if args.count < 0:
        raise CliError("--count must be >= 0")
    rng = np.random.default_rng(args.seed)
    lines = []
    for _ in range(args.count):
        if task == "nth_farthest":
            item = tasks.gen_nth_farthest(rng, args.dim, args.seq_len)
        else:
            item = tasks.gen_memorization(rng, task, args.vocab, args.length)
        lines.append(json.dumps(item.to_json()))
    Path(args.out).write_text("".join(line + "\n" for line in lines))
    return 0


def _read_episodes(path: Path, config: TrainConfig) -> list:
    try:
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except FileNotFoundError:
        raise CliError(f"episode file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"episode file {path} is not JSONL: {exc}") from None
    out = []
    for i, row in enumerate(rows):
        if row.get("task") != config.task:
            raise CliError(f"episode {i} is a {row.get('task')!r} episode, checkpoint is {config.task!r}")
        if config.task == "nth_farthest":
            ep = tasks.NthFarthestEpisode.from_json(row)
            if ep.vectors.shape != (config.seq_len, config.dim):
                raise CliError(f"episode {i} has shape {ep.vectors.shape}, "
                               f"checkpoint expects ({config.seq_len}, {config.dim})")
        else:
            ep = tasks.SeqSample.from_json(row)
            if len(ep.input_tokens) != config.length or max(ep.input_tokens, default=0) >= config.vocab:
                raise CliError(f"episode {i} does not match length={config.length}, vocab={config.vocab}")
        out.append(ep)
    if not out:
        raise CliError(f"no episodes in {path}")
    return out


def cmd_dump_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config, params, _ = trainer.read_checkpoint(ckpt)
    if config.model != "rmc":
        raise CliError(f"no attention to dump: checkpoint model is {config.model!r}")
    episodes = _read_episodes(args.episodes, config)
    if not 0 <= args.index < len(episodes):
        raise CliError(f"--index {args.index} outside 0..{len(episodes) - 1}")
    episode = episodes[args.index]
    model = trainer.Model(config)
    batch = trainer.batch_from_episodes(config, [episode])
    logits, traces = model.logits(nn.as_tensors(params), batch, keep_weights=True)
    attention = [trace.as_array(0).tolist() for trace in traces]
    pred = np.argmax(logits.data, axis=1)
    meta = episode.to_json()
    if config.task == "nth_farthest":
        meta["prediction"] = int(pred[0]) + 1
    else:
        meta["prediction"] = [int(p) for p in pred]
    out = {
        "format": "attention-trace/1",
        "layout": "attention[timestep][block][head][memory_row][column]; columns are memory slots then the input row",
        "mem_slots": config.mem_slots,
        "num_blocks": config.num_blocks,
        "num_heads": config.num_heads,
        "episode": meta,
        "attention": attention,
    }
    save_json(Path(args.out), out)
    return 0


def cmd_gradcheck(args) -> int:
    report = trainer.grad_check_model(model=args.model, gate_style=args.gate_style,
                                      num_blocks=args.blocks, eps=args.eps, tol=args.tol,
                                      seed=args.seed or 0)
    print(f"max_relative_error={report.max_relative_error!r} tol={args.tol!r} "
          f"params={report.num_params} {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def _parse_grid(specs: list[str]) -> list[tuple[str, list]]:
    grid = []
    for spec in specs:
        if "=" not in spec:
            raise CliError(f"--grid entries look like field=v1,v2; got {spec!r}")
        name, values = spec.split("=", 1)
        parsed = []
        for v in values.split(","):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        grid.append((name, parsed))
    return grid


def _sweep_point(cfg_dict: dict, out: str) -> float:
    config = TrainConfig.from_dict(cfg_dict)
    history = run_training(config, Path(out))
    return history[-1].best_batch_accuracy if history else 0.0


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.seed).to_dict()
    grid = _parse_grid(args.grid)
    points = []
    for combo in itertools.product(*(vals for _, vals in grid)):
        cfg = dict(base)
        cfg.update({name: v for (name, _), v in zip(grid, combo)})
        TrainConfig.from_dict(cfg)  # validate every point before any run starts
        label = ",".join(f"{name}={v}" for (name, _), v in zip(grid, combo)) or "base"
        points.append((cfg, str(Path(args.out) / label)))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_point, *zip(*points)))
    else:
        results = [_sweep_point(cfg, out) for cfg, out in points]
    for (_, out), best in zip(points, results):
        print(f"{out}\tbest_batch_accuracy={best!r}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relmem", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint on fresh data")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--batches", type=int, default=100)
    s.add_argument("--task")
    s.add_argument("--seed", type=int, default=12345)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gen", help="write a JSONL dataset")
    s.add_argument("--task", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--seq-len", type=int, default=8)
    s.add_argument("--vocab", type=int, default=10)
    s.add_argument("--length", type=int, default=5)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("dump-attention", help="attention weights of an RMC on one episode")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--episodes", required=True, type=Path)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_dump_attention)

    s = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    s.add_argument("--model", choices=trainer.MODELS, default="rmc")
    s.add_argument("--gate-style", choices=("unit", "memory"), default="unit")
    s.add_argument("--blocks", type=int, default=1)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="train every point of a config grid")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--grid", action="append", default=[], metavar="FIELD=V1,V2")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ContractError, trainer.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
