"""Exposure-bias measurement and the regional decomposition diagnostics.

Exposure bias is the gap between the student's per-step loss on its own
rollout prefixes and on teacher prefixes:

    EB = E_{s ~ d_student}[FKL(pi_T || pi_theta)] - E_{s ~ d_teacher}[...]

Rollouts sample from the full student softmax for exactly template_length
steps; an early EOS does not truncate accounting, so both averages run over
identical position sets.  The regional contribution of a state set uses
|kappa|-weighted absolute probability deviations; the theoretical bound
diagnostic uses signed kappa plus a quadratic term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import StudentModel
from .oracle import Example, OracleSpec
from .sensitivity import ACTION_COLUMN, KappaTable, Partition, partition_bridge_garden
from .vocab import BOS, EVAL_ACTIONS, VOCAB_SIZE


class StudentPolicy:
    """Rollout/evaluation adapter for a trained student."""

    def __init__(self, model: StudentModel):
        self.model = model
        model.eval()

    def prefix_log_probs(self, tokens: np.ndarray) -> np.ndarray:
        """Log next-token probabilities at every position of teacher prefixes."""
        B, T = tokens.shape
        inp = torch.cat([torch.full((B, 1), BOS, dtype=torch.long),
                         torch.tensor(tokens[:, :T - 1], dtype=torch.long)], dim=1)
        with torch.no_grad():
            logits = self.model(inp).to(torch.float64)
        return torch.log_softmax(logits, dim=-1).numpy()

    def rollouts(self, n: int, length: int, seed: int,
                 chunk: int = 1024) -> np.ndarray:
        """Sample n autoregressive rollouts; returns log-prob rows (n, length, V).

        The sampled tokens themselves are not returned: every per-step loss
        depends only on the distribution the student produced at that step.
        """
        rng = np.random.Generator(np.random.PCG64(seed))
        out = np.empty((n, length, VOCAB_SIZE))
        for start in range(0, n, chunk):
            rows = min(chunk, n - start)
            cache = self.model.begin_cache(rows, max_len=length + 1)
            tokens = torch.full((rows,), BOS, dtype=torch.long)
            for t in range(length):
                logits = cache.extend(tokens).to(torch.float64)
                lp = torch.log_softmax(logits, dim=-1).numpy()
                out[start:start + rows, t] = lp
                cdf = np.cumsum(np.exp(lp), axis=1)
                u = rng.random(rows) * cdf[:, -1]
                tokens = torch.from_numpy(
                    np.minimum((cdf < u[:, None]).sum(axis=1), VOCAB_SIZE - 1))
        return out


class TeacherTablePolicy:
    """A policy that reproduces the oracle's own tables (EB sanity baseline)."""

    def __init__(self, oracle: OracleSpec):
        self.oracle = oracle
        with np.errstate(divide="ignore"):
            self._log = np.log(oracle.distribution_matrix())

    def prefix_log_probs(self, tokens: np.ndarray) -> np.ndarray:
        B = tokens.shape[0]
        return np.broadcast_to(self._log, (B, *self._log.shape)).copy()

    def rollouts(self, n: int, length: int, seed: int) -> np.ndarray:
        return np.broadcast_to(self._log, (n, length, VOCAB_SIZE)).copy()


def _fkl_rows(teacher: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    """FKL(teacher || policy) per (row, position); zero-mass entries skipped."""
    p = teacher[None, :, :]
    plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    return (plogp - np.where(p > 0, p * log_probs, 0.0)).sum(axis=2)


@dataclass(frozen=True)
class EBResult:
    eb: float
    rollout_loss: float
    tf_loss: float
    repeats: int
    rollout_se: float

    def as_dict(self) -> dict:
        return {"eb": self.eb, "rollout_loss": self.rollout_loss,
                "tf_loss": self.tf_loss, "repeats": self.repeats,
                "rollout_se": self.rollout_se}


def exposure_bias(model_or_policy, oracle: OracleSpec, eval_set,
                  repeats: int = 30, seed: int = 0) -> EBResult:
    """Rollout loss minus teacher-forced loss, averaged over rollout repeats."""
    if repeats <= 0:
        raise ValueError("repeats must be positive")
    policy = (StudentPolicy(model_or_policy)
              if isinstance(model_or_policy, StudentModel) else model_or_policy)
    teacher = oracle.distribution_matrix()
    T = oracle.template_length
    E = len(eval_set)

    tokens = np.array([ex.tokens for ex in eval_set])
    tf_losses = _fkl_rows(teacher, policy.prefix_log_probs(tokens))
    tf_loss = float(tf_losses.mean())

    # one rollout per (example, repeat) pair, batched through one pass;
    # the repeat index is the leading block for the standard error
    lp = policy.rollouts(E * repeats, T,
                         seed=int(np.random.SeedSequence(seed).generate_state(1)[0]))
    losses = _fkl_rows(teacher, lp).reshape(repeats, E, T)
    per_repeat = losses.mean(axis=(1, 2))
    rollout_loss = float(per_repeat.mean())
    se = float(per_repeat.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else 0.0
    return EBResult(eb=rollout_loss - tf_loss, rollout_loss=rollout_loss,
                    tf_loss=tf_loss, repeats=repeats, rollout_se=se)


# --- regional decomposition ------------------------------------------------------

def student_probs(model: StudentModel, oracle: OracleSpec, examples) -> np.ndarray:
    """pi_theta at every teacher-prefix state; (E, T, V) float64."""
    policy = StudentPolicy(model)
    tokens = np.array([ex.tokens for ex in examples])
    return np.exp(policy.prefix_log_probs(tokens))


def regional_contributions(model: StudentModel, table: KappaTable,
                           partition: Partition, oracle: OracleSpec,
                           examples) -> dict[str, float]:
    """Mean |kappa|-weighted absolute deviation within each region."""
    if model.model_id() != table.model_id:
        raise ValueError("model does not match the kappa table (id mismatch)")
    probs = student_probs(model, oracle, examples)
    teacher = oracle.distribution_matrix()
    cols = list(table.actions)
    delta = np.abs(probs[:, :, cols] - teacher[None, :, cols])
    weighted = (np.abs(table.kappa) * delta).sum(axis=2)
    out = {}
    for name, states in (("bridge", partition.bridge), ("garden", partition.garden)):
        out[name] = float(np.mean([weighted[e, t] for e, t in states]))
    return out


def c2_constant(l_max: float, beta: float, c_conc: float, horizon: int) -> float:
    """Constructive quadratic-term constant: L_max / (2 beta^2) * C_conc * T(T-1)."""
    if beta <= 0 or l_max < 0 or c_conc < 1:
        raise ValueError("need l_max >= 0, beta > 0, c_conc >= 1")
    return l_max / (2.0 * beta ** 2) * c_conc * horizon * (horizon - 1)


def f_bound(model: StudentModel, table: KappaTable, c2: float,
            oracle: OracleSpec, examples) -> float:
    """Mean signed-kappa weighted deviation plus the quadratic term."""
    if c2 < 0:
        raise ValueError("C2 must be nonnegative")
    if model.model_id() != table.model_id:
        raise ValueError("model does not match the kappa table (id mismatch)")
    probs = student_probs(model, oracle, examples)
    teacher = oracle.distribution_matrix()
    cols = list(table.actions)
    delta_eval = np.abs(probs[:, :, cols] - teacher[None, :, cols])
    linear = (table.kappa * delta_eval).sum(axis=2)
    l1 = np.abs(probs - teacher[None]).sum(axis=2)
    return float((linear + c2 * l1 ** 2).mean())


# --- teacher confidence -----------------------------------------------------------

def confidence(spec: OracleSpec, position: int) -> float:
    """c_T = 1 - H(candidates) / log K at a choice state."""
    state = spec.schedule[position]
    k = len(state.candidates)
    if k < 2:
        raise ValueError(f"position {position} is deterministic; confidence undefined")
    p = np.asarray(state.probs)
    h = float(-(p[p > 0] * np.log(p[p > 0])).sum())
    return 1.0 - h / math.log(k)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average-rank tie handling."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError("inputs must have equal length")
    if xs.size < 3:
        raise ValueError("need at least 3 points")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        raise ValueError("rank correlation undefined for constant input")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def confidence_kappa_correlation(spec: OracleSpec, table: KappaTable,
                                 partition: Partition | None = None):
    """(rho, mean c_T over bridge choice states, mean c_T over garden choice states)."""
    choice = spec.choice_positions
    E = table.n_examples
    if len(choice) * E < 3:
        raise ValueError("too few choice states")
    c_by_pos = {t: confidence(spec, t) for t in choice}
    xs = [c_by_pos[t] for t in choice for _ in range(E)]
    ys = [table.kappa_state[e, t] for t in choice for e in range(E)]
    rho = spearman(xs, ys)
    if partition is None:
        partition = partition_bridge_garden(table)
    means = {}
    for name, states in (("bridge", partition.bridge), ("garden", partition.garden)):
        vals = [c_by_pos[t] for e, t in states if t in c_by_pos]
        means[name] = float(np.mean(vals)) if vals else float("nan")
    return rho, means["bridge"], means["garden"]
