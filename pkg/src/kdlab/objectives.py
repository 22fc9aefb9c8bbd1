"""Supervision objectives: hard / soft losses, hybrid mixing rules, risk penalty.

All losses are in nats.  Soft losses support four divergences between the
teacher distribution p and the student distribution q = softmax(logits):

* ``fkl``  forward KL  D(p || q), zero-mass teacher entries contribute 0;
* ``rkl``  reverse KL  D(q || p), teacher probabilities floored at 1e-12
  outside the candidate support (recorded in run metadata);
* ``js``   Jensen-Shannon divergence;
* ``tv``   total variation distance.

Functions operate on trailing vocab dimensions so the same code serves
single rows (spec-level operations) and training batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .oracle import DETERMINISTIC, HIGH_RISK, OracleSpec
from .vocab import VOCAB_SIZE

DIVERGENCES = ("fkl", "rkl", "js", "tv")
RKL_FLOOR = 1e-12

MODES = (
    "hard", "soft", "hybrid_static", "hybrid_confidence", "hybrid_entropy",
    "hybrid_curriculum", "risk_guided", "code_per_state",
)


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: str = "soft"
    divergence: str = "fkl"
    lam: float = 0.5          # lambda for static modes, lambda_max for curriculum
    warmup_fraction: float = 0.2
    alpha: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown objective mode {self.mode!r}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"unknown divergence {self.divergence!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(like.dtype)
    return torch.as_tensor(np.asarray(x), dtype=like.dtype)


def hard_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Negative log-likelihood of the target token(s)."""
    logq = torch.log_softmax(logits, dim=-1)
    target = torch.as_tensor(target)
    return -logq.gather(-1, target.unsqueeze(-1)).squeeze(-1)


def soft_loss(teacher, logits: torch.Tensor, divergence: str = "fkl") -> torch.Tensor:
    """Divergence D(teacher || student) from student logits."""
    logq = torch.log_softmax(logits, dim=-1)
    p = _as_tensor(teacher, logq)
    if divergence == "fkl":
        plogp = torch.where(p > 0, p * torch.log(p.clamp_min(1e-300)), p.new_zeros(()))
        return (plogp - p * logq).sum(-1)
    if divergence == "rkl":
        q = logq.exp()
        logp = torch.log(p.clamp_min(RKL_FLOOR))
        return (q * (logq - logp)).sum(-1)
    if divergence == "js":
        q = logq.exp()
        m = 0.5 * (p + q)
        logm = torch.log(m.clamp_min(1e-300))
        plogp = torch.where(p > 0, p * torch.log(p.clamp_min(1e-300)), p.new_zeros(()))
        kl_pm = (plogp - p * logm).sum(-1)
        kl_qm = (q * (logq - logm)).sum(-1)
        return 0.5 * (kl_pm + kl_qm)
    if divergence == "tv":
        return 0.5 * (p - logq.exp()).abs().sum(-1)
    raise ValueError(f"unknown divergence {divergence!r}")


def hybrid_loss(lam, soft, hard):
    return lam * soft + (1.0 - lam) * hard


def lambda_confidence(teacher_dist) -> float:
    """1 - max teacher probability: low weight on soft labels when confident."""
    p = np.asarray(teacher_dist, dtype=np.float64)
    return float(1.0 - p.max())


def lambda_entropy(teacher_dist) -> float:
    """Teacher entropy normalized by log |vocab|."""
    p = np.asarray(teacher_dist, dtype=np.float64)
    h = float(-(p[p > 0] * np.log(p[p > 0])).sum())
    return h / math.log(VOCAB_SIZE)


def lambda_curriculum(step: int, warmup_steps: int, lam_max: float) -> float:
    """Linear warm-up of the soft-label weight."""
    if warmup_steps <= 0:
        raise ValueError("warmup_steps must be positive")
    return min(step / warmup_steps, 1.0) * lam_max


def risk_delta(logits_at_s: torch.Tensor, logits_after_target: torch.Tensor, target: int) -> torch.Tensor:
    """log-sum-exp margin between the post-target row and the target logit."""
    return torch.logsumexp(logits_after_target, dim=-1) - logits_at_s[..., target]


def risk_penalty(logits_at_s: torch.Tensor, logits_after_target: torch.Tensor,
                 target: int, alpha: float = 0.1) -> torch.Tensor:
    delta = risk_delta(logits_at_s, logits_after_target, target)
    return (alpha / 4.0) * delta ** 2


def ambiguity(spec: OracleSpec, position: int) -> float:
    """Normalized teacher entropy over the candidate set (0 for K=1)."""
    state = spec.schedule[position]
    k = len(state.candidates)
    if k < 2:
        return 0.0
    p = np.asarray(state.probs)
    h = float(-(p[p > 0] * np.log(p[p > 0])).sum())
    return h / math.log(k)


def code_per_state_weight(spec: OracleSpec, position: int, lam: float) -> float:
    """Per-position soft weight for the code domain: hard at high-risk states,
    lambda times normalized teacher ambiguity elsewhere."""
    if spec.domain != "code":
        raise ValueError("per-state weighting rule applies to the code domain only")
    state = spec.schedule[position]
    if state.kind == HIGH_RISK:
        return 0.0
    return lam * ambiguity(spec, position)


def position_lambdas(spec: OracleSpec, cfg: ObjectiveConfig,
                     step: int = 0, total_steps: int = 1) -> np.ndarray:
    """Soft-label weight for every template position under the configured rule."""
    T = spec.template_length
    mat = spec.distribution_matrix()
    if cfg.mode == "hard":
        return np.zeros(T)
    if cfg.mode == "soft":
        return np.ones(T)
    if cfg.mode in ("hybrid_static", "risk_guided"):
        return np.full(T, cfg.lam)
    if cfg.mode == "hybrid_confidence":
        return np.array([lambda_confidence(mat[t]) for t in range(T)])
    if cfg.mode == "hybrid_entropy":
        return np.array([lambda_entropy(mat[t]) for t in range(T)])
    if cfg.mode == "hybrid_curriculum":
        warmup = max(1, int(round(cfg.warmup_fraction * total_steps)))
        return np.full(T, lambda_curriculum(step, warmup, cfg.lam))
    if cfg.mode == "code_per_state":
        return np.array([code_per_state_weight(spec, t, cfg.lam) for t in range(T)])
    raise ValueError(f"unknown objective mode {cfg.mode!r}")


def batch_objective(logits: torch.Tensor, tokens: torch.Tensor, teacher: torch.Tensor,
                    lambdas: torch.Tensor, cfg: ObjectiveConfig) -> torch.Tensor:
    """Mean per-position training loss for a batch.

    ``logits``: (B, T+1, V) rows predicting positions 0..T (the extra row
    feeds the risk penalty); ``tokens``: (B, T) hard targets; ``teacher``:
    (T, V) position-indexed distribution; ``lambdas``: (T,) soft weights.
    """
    B, Tp1, V = logits.shape
    T = tokens.shape[1]
    rows = logits[:, :T]
    hard = hard_loss(rows, tokens)
    if cfg.mode == "risk_guided":
        lse_next = torch.logsumexp(logits[:, 1:T + 1], dim=-1)
        target_logit = rows.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
        hard = hard + (cfg.alpha / 4.0) * (lse_next - target_logit) ** 2
    soft = soft_loss(teacher.unsqueeze(0), rows, cfg.divergence)
    lam = lambdas.unsqueeze(0)
    return hybrid_loss(lam, soft, hard).mean()
