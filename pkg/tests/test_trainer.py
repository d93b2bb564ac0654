import math

import numpy as np
import pytest

from relmem import nn, trainer
from relmem.tensor import ContractError
from relmem.trainer import ConfigError, TrainConfig, TrainingError, evaluate, train

TINY = dict(dim=2, seq_len=3, mem_slots=2, mem_size=8, num_heads=2, hidden_size=8,
            head_layers=1, head_units=16, batch=4, steps=3)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def test_zero_steps_returns_initial_params():
    cfg = tiny(steps=0)
    history, ckpt = train(cfg)
    assert history == []
    assert ckpt["step"] == 0
    init_rng, _ = trainer._rngs(cfg.seed)
    expected = trainer.Model(cfg).init_params(init_rng)
    _, params, opt = trainer.read_checkpoint(ckpt)
    assert params.keys() == expected.keys()
    for k in expected:
        assert np.array_equal(params[k], expected[k])
    assert opt.step == 0


@pytest.mark.parametrize("model", ["rmc", "lstm"])
def test_same_seed_same_history_except_wall_time(model):
    ticks = iter(range(1000))
    a, ca = train(tiny(model=model), clock=lambda: next(ticks))
    b, cb = train(tiny(model=model))
    strip = lambda h: [(r.step, r.loss, r.batch_accuracy, r.best_batch_accuracy) for r in h]
    assert strip(a) == strip(b)
    assert ca == cb
    c, _ = train(tiny(model=model, seed=1))
    assert strip(c) != strip(a)


def test_history_rows_and_best_is_running_max():
    history, ckpt = train(tiny(steps=6, eval_every=2))
    assert [r.step for r in history] == [2, 4, 6]
    best = 0.0
    for r in history:
        best = max(best, r.batch_accuracy)
        assert r.best_batch_accuracy == best
        assert math.isfinite(r.loss)
    assert ckpt["step"] == 6


def test_early_stop_callback():
    seen = []
    history, ckpt = train(tiny(steps=10), on_metrics=lambda r: seen.append(r) or r.step == 4)
    assert [r.step for r in history] == [1, 2, 3, 4] and len(seen) == 4
    assert ckpt["step"] == 4


@pytest.mark.parametrize("field,value", [("lr", -1.0), ("lr", 0.0), ("batch", 0), ("mem_slots", 0),
                                          ("num_heads", 3), ("model", "gru"), ("task", "sort"),
                                          ("gate_style", "cell"), ("seq_len", 1), ("steps", -1)])
def test_config_errors_name_the_field(field, value):
    with pytest.raises(ConfigError) as info:
        tiny(**{field: value})
    assert info.value.field == field
    assert field in str(info.value)


def test_from_dict_rejects_unknown_fields():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_dict({"learning_rate": 0.1})
    assert info.value.field == "learning_rate"
    assert TrainConfig.from_dict(tiny().to_dict()) == tiny()


def test_non_finite_loss_raises_with_step():
    cfg = tiny(steps=5)
    original = nn.adam_step

    def poisoned(params, grads, state):
        new, st = original(params, grads, state)
        if st.step == 2:
            new = {k: np.full_like(v, np.nan) for k, v in new.items()}
        return new, st

    trainer.nn.adam_step = poisoned
    try:
        with pytest.raises(TrainingError, match="step 3"):
            train(cfg)
    finally:
        trainer.nn.adam_step = original


def test_models_share_interface():
    for model in ("rmc", "lstm"):
        cfg = tiny(model=model)
        m = trainer.Model(cfg)
        p = m.init_params(np.random.default_rng(0))
        batch = trainer.make_batch(cfg, np.random.default_rng(1))
        logits, traces = m.logits(nn.as_tensors(p), batch, keep_weights=True)
        assert logits.shape == (4, 3)
        assert (traces is None) == (model == "lstm")


def test_memorization_batch_stacks_answer_steps():
    cfg = tiny(task="double", length=3)
    batch = trainer.make_batch(cfg, np.random.default_rng(0))
    assert batch.answer_steps == list(range(4, 10))
    assert batch.targets.shape == (6 * 4,)
    assert np.all((batch.targets >= 0) & (batch.targets < 10))


def test_evaluate_chance_and_task_check():
    cfg = TrainConfig(dim=4, seq_len=8, mem_slots=2, mem_size=8, num_heads=2, head_layers=1,
                      head_units=16, steps=0)
    _, ckpt = train(cfg)
    acc = evaluate(ckpt, 100, batch_size=32)
    assert abs(acc - 0.125) < 0.05
    with pytest.raises(ContractError):
        evaluate(ckpt, 1, task="copy")


def test_evaluate_perfect_predictor():
    """A head whose bias dominates maps everything to class 0; the episodes whose answer is 0 score 1."""
    cfg = tiny(steps=0)
    _, ckpt = train(cfg)
    _, params, _ = trainer.read_checkpoint(ckpt)
    last = max(int(k.split(".")[1]) for k in params if k.startswith("head."))
    params[f"head.{last}.w"][:] = 0.0
    params[f"head.{last}.b"][:] = [[1.0, 0.0, 0.0]]
    ckpt["params"] = {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()}
    rng = np.random.default_rng(12345)
    batches = [trainer.make_batch(cfg, rng, 8) for _ in range(20)]
    expected = np.mean(np.concatenate([b.targets for b in batches]) == 0)
    assert evaluate(ckpt, 20, batch_size=8) == pytest.approx(expected)


def test_initial_loss_near_log_classes():
    cfg = TrainConfig(dim=16, seq_len=8, steps=0)
    assert 1.8 <= trainer.initial_loss(cfg, batch_size=16) <= 2.4


@pytest.mark.parametrize("kw", [dict(model="rmc", gate_style="unit"), dict(model="rmc", gate_style="memory"),
                                dict(model="rmc", num_blocks=2), dict(model="rmc", use_output_gate=True),
                                dict(model="lstm")])
def test_grad_check_model(kw):
    report = trainer.grad_check_model(**kw)
    assert report.passed, report.per_param
    assert report.max_relative_error < 1e-4


def test_grad_check_model_fails_at_zero_tolerance_and_guards_size():
    assert not trainer.grad_check_model(tol=0.0).passed
    with pytest.raises(ContractError):
        trainer.grad_check_model(mem_size=64, num_heads=2, mem_slots=2)
