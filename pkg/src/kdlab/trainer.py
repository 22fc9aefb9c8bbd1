"""Optimization loop and the validation-based mixing-coefficient protocol.

AdamW (betas 0.9/0.999, eps 1e-8, decoupled weight decay 0.01 on matrices
only), linear warmup then cosine decay, one shuffled pass over the training
split per epoch, early stopping on the per-domain validation criterion:
teacher-forced forward KL for dialogue, validation rollout exposure bias for
math and code.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import StudentModel
from .objectives import ObjectiveConfig, batch_objective, position_lambdas, soft_loss
from .oracle import Dataset, Example, OracleSpec
from .vocab import BOS

CRITERIA = ("teacher_forced_kl", "rollout_eb")
DOMAIN_CRITERION = {"dialogue": "teacher_forced_kl", "math": "rollout_eb", "code": "rollout_eb"}
LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 2e-4
    warmup_epochs: int = 6
    max_epochs: int = 24
    early_stop_patience: int = 6
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    val_rollout_repeats: int = 5

    def __post_init__(self):
        if self.warmup_epochs >= self.max_epochs:
            raise ValueError("warmup_epochs must be < max_epochs")


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_metric: float = math.inf
    criterion: str = ""

    def record(self, epoch: int, train_loss: float, val_metric: float, lr: float) -> None:
        self.epochs.append({
            "epoch": epoch, "train_loss": train_loss,
            "val_metric": val_metric, "lr": lr,
        })


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup to lr_max, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def _example_tensor(examples: tuple[Example, ...]) -> torch.Tensor:
    return torch.tensor([ex.tokens for ex in examples], dtype=torch.long)


def teacher_forced_kl(model: StudentModel, examples, oracle: OracleSpec,
                      divergence: str = "fkl") -> float:
    """Mean soft loss over teacher prefixes, 64-bit accumulation."""
    tokens = _example_tensor(examples)
    T = oracle.template_length
    inp = torch.cat([torch.full((tokens.shape[0], 1), BOS), tokens[:, :T - 1]], dim=1)
    teacher = torch.tensor(oracle.distribution_matrix(), dtype=torch.float64)
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, inp.shape[0], 512):
            chunk = inp[start:start + 512]
            logits = model(chunk).to(torch.float64)
            losses = soft_loss(teacher.unsqueeze(0), logits, divergence)
            total += float(losses.sum())
            count += losses.numel()
    return total / count


def validation_metric(model: StudentModel, val_set, oracle: OracleSpec,
                      criterion: str, repeats: int = 5, seed: int = 0) -> float:
    if criterion not in CRITERIA:
        raise ValueError(f"unknown validation criterion {criterion!r}")
    if criterion == "teacher_forced_kl":
        return teacher_forced_kl(model, val_set, oracle)
    from .analysis import exposure_bias
    return exposure_bias(model, oracle, val_set, repeats=repeats, seed=seed).eb


def train(model: StudentModel, dataset: Dataset, oracle: OracleSpec,
          objective: ObjectiveConfig, cfg: TrainConfig,
          criterion: str | None = None) -> tuple[StudentModel, TrainHistory]:
    """Train to the best-validation checkpoint with early stopping."""
    if not dataset.train:
        raise ValueError("empty training split")
    if dataset.domain != oracle.domain:
        raise ValueError("dataset and oracle domains differ")
    criterion = criterion or DOMAIN_CRITERION[oracle.domain]

    tokens = _example_tensor(dataset.train)
    N, T = tokens.shape
    inp = torch.cat([torch.full((N, 1), BOS), tokens], dim=1)  # extra row feeds risk penalty
    teacher_np = oracle.distribution_matrix()
    teacher = torch.tensor(teacher_np, dtype=model.dtype)

    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    opt = torch.optim.AdamW([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)

    drop_rng = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory(criterion=criterion)
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    step = 0
    static_lambdas = None
    if objective.mode != "hybrid_curriculum":
        static_lambdas = torch.tensor(position_lambdas(oracle, objective), dtype=model.dtype)

    for epoch in range(1, cfg.max_epochs + 1):
        order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, epoch))))
        order = torch.from_numpy(order_rng.permutation(N))
        model.train()
        epoch_loss = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = lr_at(step, total_steps, warmup_steps, cfg.learning_rate)
            for group in opt.param_groups:
                group["lr"] = lr
            lambdas = static_lambdas
            if lambdas is None:
                lambdas = torch.tensor(
                    position_lambdas(oracle, objective, step=step, total_steps=total_steps),
                    dtype=model.dtype)
            logits = model(inp[idx], rng=drop_rng)
            loss = batch_objective(logits, tokens[idx], teacher, lambdas, objective)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {float(loss)!r}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
            step += 1
        model.eval()
        metric = validation_metric(model, dataset.val, oracle, criterion,
                                   repeats=cfg.val_rollout_repeats, seed=cfg.seed)
        history.record(epoch, epoch_loss / N, metric, lr_at(step, total_steps, warmup_steps, cfg.learning_rate))
        if metric < history.best_metric:
            history.best_metric = metric
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    history.stopped_epoch = len(history.epochs)
    model.load_state_dict(best_state)
    model.eval()
    return model, history


# --- mixing-coefficient selection ---------------------------------------------

@dataclass(frozen=True)
class LambdaStat:
    lam: float
    mean: float
    se: float = 0.0


def select_lambda(stats: list[LambdaStat], domain: str) -> float:
    """Apply the per-domain selection rule to per-lambda validation stats.

    dialogue / math: smallest-lambda argmin of the criterion mean.
    code: the smallest lambda whose mean is within one standard error of the
    best mean (one-standard-error rule).
    """
    if not stats:
        raise ValueError("empty lambda grid")
    ordered = sorted(stats, key=lambda s: s.lam)
    best = min(ordered, key=lambda s: (s.mean, s.lam))
    if domain in ("dialogue", "math"):
        return best.lam
    if domain == "code":
        threshold = best.mean + best.se
        for s in ordered:
            if s.mean <= threshold:
                return s.lam
        return best.lam
    raise ValueError(f"unknown domain {domain!r}")


def run_lambda_grid(dataset: Dataset, oracle: OracleSpec, objective_mode: str,
                    train_cfg: TrainConfig, model_factory, grid=LAMBDA_GRID,
                    seeds: tuple[int, ...] = (0, 1, 2),
                    log=lambda msg: None) -> tuple[float, list[LambdaStat]]:
    """Train the hybrid objective across the grid and apply the domain rule.

    ``model_factory(seed)`` builds a fresh student.  Standard errors come
    from per-seed repeats of the validation criterion.
    """
    criterion = DOMAIN_CRITERION[oracle.domain]
    stats = []
    for lam in grid:
        values = []
        for seed in seeds:
            objective = ObjectiveConfig(mode=objective_mode, lam=lam)
            cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
            model, history = train(model_factory(seed), dataset, oracle, objective, cfg,
                                   criterion=criterion)
            values.append(history.best_metric)
            log(f"lambda={lam} seed={seed} {criterion}={history.best_metric:.6f}")
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
        stats.append(LambdaStat(lam=lam, mean=mean, se=se))
    return select_lambda(stats, oracle.domain), stats
