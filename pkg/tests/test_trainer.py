import math

import numpy as np
import pytest
import torch

import kdlab.trainer as trainer_mod
from kdlab.model import ModelConfig, StudentModel
from kdlab.objectives import ObjectiveConfig
from kdlab.oracle import Dataset, build_oracle, generate_dataset, sample_example
from kdlab.trainer import (LAMBDA_GRID, LambdaStat, TrainConfig, TrainingDiverged,
                           lr_at, select_lambda, teacher_forced_kl, train,
                           validation_metric)


def small_dataset(domain, n_train=192, n_val=48, n_eval=8, seed=0):
    spec = build_oracle(domain)
    mk = lambda lo, hi: tuple(sample_example(spec, s) for s in range(lo, hi))
    return spec, Dataset(domain=domain, seed=seed,
                         train=mk(0, n_train),
                         val=mk(10_000, 10_000 + n_val),
                         eval=mk(20_000, 20_000 + n_eval))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=24, max_epochs=24)


def test_lr_schedule_shape():
    total, warm, lr_max = 240, 60, 2e-4
    values = [lr_at(s, total, warm, lr_max) for s in range(total + 1)]
    assert values[0] == 0.0
    # linear through warmup
    for s in range(warm):
        assert abs(values[s] - lr_max * s / warm) < 1e-18
    # continuous at the boundary
    assert abs(values[warm] - lr_max) < 1e-9 * lr_max
    # nonincreasing cosine afterwards, ending at zero
    after = values[warm:]
    assert all(a >= b - 1e-15 for a, b in zip(after, after[1:]))
    assert abs(values[total]) < 1e-12


def test_adamw_matches_reference_update():
    # hand-computed bias-corrected AdamW with decoupled weight decay
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    opt = torch.optim.AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    grads = [torch.tensor([0.5, -1.5], dtype=torch.float64),
             torch.tensor([-0.25, 0.75], dtype=torch.float64),
             torch.tensor([1.0, 0.1], dtype=torch.float64)]
    ref = p.detach().clone()
    m = torch.zeros(2, dtype=torch.float64)
    v = torch.zeros(2, dtype=torch.float64)
    for step, g in enumerate(grads, start=1):
        opt.zero_grad()
        p.grad = g.clone()
        opt.step()
        ref = ref * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        ref = ref - lr * m_hat / (v_hat.sqrt() + eps)
        assert torch.allclose(p.detach(), ref, atol=1e-12, rtol=0)


def test_train_rejects_empty_dataset():
    spec = build_oracle("dialogue")
    empty = Dataset(domain="dialogue", seed=0, train=(), val=(), eval=())
    with pytest.raises(ValueError):
        train(StudentModel(ModelConfig(), 0), empty, spec,
              ObjectiveConfig(mode="hard"), TrainConfig())


def test_train_rejects_domain_mismatch():
    spec = build_oracle("math")
    _, ds = small_dataset("dialogue")
    with pytest.raises(ValueError):
        train(StudentModel(ModelConfig(), 0), ds, spec,
              ObjectiveConfig(mode="hard"), TrainConfig())


def test_train_deterministic_given_seed():
    spec, ds = small_dataset("dialogue")
    cfg = TrainConfig(max_epochs=3, warmup_epochs=1, batch_size=64, seed=7)
    results = []
    for _ in range(2):
        model = StudentModel(ModelConfig(), seed=7)
        _, hist = train(model, ds, spec, ObjectiveConfig(mode="soft"), cfg)
        results.append(hist.best_metric)
    assert results[0] == results[1]


def test_train_loss_decreases_after_first_epoch():
    for domain in ("dialogue", "math", "code"):
        spec, ds = small_dataset(domain)
        model = StudentModel(ModelConfig(), seed=1)
        init_metric = teacher_forced_kl(model, ds.val, spec)
        cfg = TrainConfig(max_epochs=2, warmup_epochs=1, batch_size=64, seed=1)
        _, hist = train(model, ds, spec, ObjectiveConfig(mode="soft"), cfg,
                        criterion="teacher_forced_kl")
        assert hist.epochs[0]["val_metric"] < init_metric


def test_teacher_forced_kl_decreases_over_epochs():
    spec, ds = small_dataset("dialogue")
    model = StudentModel(ModelConfig(), seed=2)
    cfg = TrainConfig(max_epochs=3, warmup_epochs=1, batch_size=64, seed=2)
    _, hist = train(model, ds, spec, ObjectiveConfig(mode="soft"), cfg,
                    criterion="teacher_forced_kl")
    metrics = [e["val_metric"] for e in hist.epochs]
    assert metrics[0] > metrics[1] > metrics[2]


def test_early_stop_on_constant_metric(monkeypatch):
    spec, ds = small_dataset("dialogue", n_train=64, n_val=8)
    calls = {"n": 0}

    def constant_metric(*args, **kwargs):
        calls["n"] += 1
        return 1.0

    monkeypatch.setattr(trainer_mod, "validation_metric", constant_metric)
    cfg = TrainConfig(max_epochs=20, warmup_epochs=1, batch_size=64,
                      early_stop_patience=4, seed=0)
    _, hist = train(StudentModel(ModelConfig(), 0), ds, spec,
                    ObjectiveConfig(mode="hard"), cfg)
    assert calls["n"] == cfg.early_stop_patience + 1
    assert hist.best_epoch == 1


def test_nan_loss_aborts(monkeypatch):
    spec, ds = small_dataset("dialogue", n_train=64, n_val=8)

    def nan_objective(*args, **kwargs):
        return torch.tensor(float("nan"), requires_grad=True)

    monkeypatch.setattr(trainer_mod, "batch_objective", nan_objective)
    with pytest.raises(TrainingDiverged):
        train(StudentModel(ModelConfig(), 0), ds, spec,
              ObjectiveConfig(mode="hard"), TrainConfig(max_epochs=2, warmup_epochs=1))


def test_validation_metric_criteria():
    spec, ds = small_dataset("dialogue", n_train=64, n_val=8)
    model = StudentModel(ModelConfig(), seed=3)
    tf = validation_metric(model, ds.val, spec, "teacher_forced_kl")
    assert tf > 0
    eb = validation_metric(model, ds.val[:4], spec, "rollout_eb", repeats=2, seed=0)
    assert isinstance(eb, float)
    with pytest.raises(ValueError):
        validation_metric(model, ds.val, spec, "perplexity")


def test_select_lambda_rules():
    # argmin with smaller-lambda tie-break
    stats = [LambdaStat(l, m) for l, m in zip(LAMBDA_GRID, (9, 5, 5, 7, 8, 9, 9, 9, 9))]
    assert select_lambda(stats, "dialogue") == 0.2
    assert select_lambda(stats, "math") == 0.2
    # all equal -> smallest lambda
    flat = [LambdaStat(l, 1.0) for l in LAMBDA_GRID]
    assert select_lambda(flat, "dialogue") == 0.1
    # one-standard-error rule: smallest lambda whose mean <= best + best_se
    means = (0.05, 0.03, 0.031, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09)
    stats = [LambdaStat(l, m, se=0.002) for l, m in zip(LAMBDA_GRID, means)]
    assert select_lambda(stats, "code") == 0.2
    means2 = (0.032, 0.03, 0.031, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09)
    stats2 = [LambdaStat(l, m, se=0.002) for l, m in zip(LAMBDA_GRID, means2)]
    assert select_lambda(stats2, "code") == 0.1
    with pytest.raises(ValueError):
        select_lambda([], "code")
    with pytest.raises(ValueError):
        select_lambda(flat, "poetry")


def test_history_records_lr_and_losses():
    spec, ds = small_dataset("dialogue", n_train=64, n_val=8)
    cfg = TrainConfig(max_epochs=3, warmup_epochs=1, batch_size=32, seed=4)
    _, hist = train(StudentModel(ModelConfig(), 4), ds, spec,
                    ObjectiveConfig(mode="hybrid_static", lam=0.5), cfg,
                    criterion="teacher_forced_kl")
    assert len(hist.epochs) == 3
    assert all({"epoch", "train_loss", "val_metric", "lr"} <= set(e) for e in hist.epochs)
    assert hist.criterion == "teacher_forced_kl"
