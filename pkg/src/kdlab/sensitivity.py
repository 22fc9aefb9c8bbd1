"""Exact token-level risk sensitivity via single-override interventions.

For a prefix state s = (example, position t) and a forced action a, the
engine computes

    Q(s, a) = expected sum of per-step student losses over positions
              t+1 .. end, where continuations are drawn from the teacher
              and the per-step loss is FKL(teacher || student) by default,

by enumerating the weighted continuation tree.  Because the teacher is
position-indexed, the tree (structure and path weights) is shared by every
example and every forced action, so the walk batches rows = (distinct
example prefixes x forced actions) through one traversal:

* deterministic stretches of the template are consumed as one multi-token
  prefill (losses for every covered position fall out of the same pass);
* decision positions fork the incremental cache node-by-node, pruning
  children whose cumulative path probability drops below ``eps`` while
  recording a sound per-state error bound;
* examples whose first t tokens coincide share one set of rows (prefix
  deduplication is exact, not an approximation).

``brute_force_q`` is the independent oracle: it enumerates every full
continuation path and runs a fresh full forward per path, with no caching
and no pruning.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import StudentModel
from .oracle import DETERMINISTIC, Example, OracleSpec
from .vocab import BOS, EVAL_ACTIONS, VOCAB_SIZE

LOSS_KINDS = ("fkl", "ce")
DEFAULT_LOSS_CAP = 64.0  # per-step loss bound used in pruning error bounds
ACTION_COLUMN = {tok: i for i, tok in enumerate(EVAL_ACTIONS)}


class ResourceBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class OverrideQuery:
    example: int
    position: int
    action: int

    def __post_init__(self):
        if self.action not in ACTION_COLUMN:
            raise ValueError(f"action {self.action} is not an evaluation action")


@dataclass(frozen=True)
class EngineConfig:
    eps: float = 0.0               # prune branches with cumulative prob < eps
    loss_kind: str = "fkl"
    loss_scale: float = 1.0
    loss_cap: float = DEFAULT_LOSS_CAP
    row_budget: int = 8192         # max cache rows in flight
    node_budget: int = 50_000_000  # guard on enumerated tree nodes per state

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


def tree_plan(oracle: OracleSpec, t: int, eps: float) -> tuple[int, int]:
    """(max level width, total loss-evaluation nodes) of the pruned tree at t.

    Counts one node per (surviving prefix, position) pair, matching the
    walk's per-level loss evaluations; widths multiply when a decision
    position is consumed.
    """
    w = np.array([1.0])
    total = 0
    widest = 1
    for tau in range(t + 1, oracle.template_length):
        total += len(w)
        state = oracle.schedule[tau]
        if state.kind != DETERMINISTIC and tau < oracle.template_length - 1:
            w = (w[:, None] * np.asarray(state.probs)[None, :]).ravel()
            if eps > 0:
                w = w[w >= eps]
            widest = max(widest, len(w))
    return widest, total


class _StepLoss:
    """Per-position loss against the teacher, 64-bit accumulation."""

    def __init__(self, oracle: OracleSpec, kind: str, scale: float):
        self.kind = kind
        self.scale = scale
        self.supp = []
        self.probs = []
        self.neg_entropy = []
        for state in oracle.schedule:
            idx = torch.tensor(state.candidates, dtype=torch.long)
            p = torch.tensor(state.probs, dtype=torch.float64)
            self.supp.append(idx)
            self.probs.append(p)
            self.neg_entropy.append(float((p * torch.log(p)).sum()))

    def __call__(self, logits: torch.Tensor, position: int) -> torch.Tensor:
        lp = torch.log_softmax(logits.to(torch.float64), dim=-1)
        ce = -(lp[:, self.supp[position]] @ self.probs[position])
        if self.kind == "fkl":
            ce = ce + self.neg_entropy[position]
        return self.scale * ce


def _walk(model: StudentModel, oracle: OracleSpec, cfg: EngineConfig,
          loss: _StepLoss, cache, logits: torch.Tensor, weights: torch.Tensor,
          tau: int, row_ids: torch.Tensor, q: torch.Tensor, err: torch.Tensor,
          entering_branch: bool = False) -> None:
    """Advance one block (n_nodes x R rows, all at position ``tau``) to the end.

    When a branch expansion would exceed the row budget the block splits:
    first along the row dimension (cache slicing, no recomputation), then at
    R == 1 along node groups.  ``q`` and ``err`` accumulate per original row
    id.  ``entering_branch`` marks re-entry from a row split: the loss and
    prune bookkeeping at ``tau`` already happened in the parent call.
    """
    T = oracle.template_length
    R = row_ids.numel()
    while True:
        if not entering_branch:
            step = loss(logits, tau).view(-1, R)
            q[row_ids] += (weights[:, None] * step).sum(0)
            if tau == T - 1:
                return
        state = oracle.schedule[tau]
        n_nodes = weights.numel()
        if state.kind == DETERMINISTIC:
            run_end = tau
            while run_end < T - 1 and oracle.schedule[run_end].kind == DETERMINISTIC:
                run_end += 1
            toks = torch.tensor([oracle.schedule[p].candidates[0] for p in range(tau, run_end)])
            out = cache.prefill(toks.repeat(n_nodes * R, 1))
            for j in range(run_end - tau - 1):
                step = loss(out[:, j], tau + 1 + j).view(-1, R)
                q[row_ids] += (weights[:, None] * step).sum(0)
            logits = out[:, -1]
            tau = run_end
            continue
        cands = state.candidates
        k = len(cands)
        child_w = (weights[:, None] * torch.tensor(state.probs, dtype=torch.float64)).ravel()
        keep = torch.ones(child_w.numel(), dtype=torch.bool)
        if cfg.eps > 0:
            keep = child_w >= cfg.eps
            if not entering_branch:
                dropped = float(child_w[~keep].sum())
                if dropped > 0:
                    err[row_ids] += dropped * (T - 1 - tau) * cfg.loss_cap
        entering_branch = False
        kept_idx = torch.nonzero(keep, as_tuple=True)[0]
        if kept_idx.numel() == 0:
            return
        needed = kept_idx.numel() * R
        if needed > cfg.row_budget:
            if R > 1:  # split rows: slice the cache, keep the tree shared
                half = R // 2
                for sl in (slice(0, half), slice(half, R)):
                    idx = (torch.arange(n_nodes)[:, None] * R
                           + torch.arange(R)[sl][None, :]).ravel()
                    _walk(model, oracle, cfg, loss, cache.select_rows(idx),
                          logits[idx], weights, tau, row_ids[sl], q, err,
                          entering_branch=True)
                return
            group = max(1, cfg.row_budget)  # R == 1: split kept children
            for start in range(0, kept_idx.numel(), group):
                part = kept_idx[start:start + group]
                parent = torch.div(part, k, rounding_mode="floor")
                sub = cache.select_rows(parent)
                child_tokens = torch.tensor(cands).repeat(n_nodes)[part]
                sub_logits = sub.extend(child_tokens)
                _walk(model, oracle, cfg, loss, sub, sub_logits, child_w[part],
                      tau + 1, row_ids, q, err)
            return
        parent = torch.div(kept_idx, k, rounding_mode="floor")
        row_index = (parent[:, None] * R + torch.arange(R)[None, :]).ravel()
        cache = cache.select_rows(row_index)
        child_tokens = torch.tensor(cands).repeat(n_nodes)[kept_idx]
        logits = cache.extend(child_tokens.repeat_interleave(R))
        weights = child_w[kept_idx]
        tau += 1


def _continuation_walk(model: StudentModel, oracle: OracleSpec,
                       prefixes: torch.Tensor, t: int, cfg: EngineConfig,
                       loss: _StepLoss) -> tuple[torch.Tensor, torch.Tensor]:
    """Q and error-bound accumulators for M (prefix, action) rows, one tree.

    ``prefixes``: (M, t+2) token rows = BOS + example tokens[:t] + action.
    """
    T = oracle.template_length
    M = prefixes.shape[0]
    q = torch.zeros(M, dtype=torch.float64)
    err = torch.zeros(M, dtype=torch.float64)
    if t >= T - 1:
        return q, err
    _, total_nodes = tree_plan(oracle, t, cfg.eps)
    if total_nodes > cfg.node_budget:
        raise ResourceBudgetError(
            f"state (t={t}) needs {total_nodes} tree nodes, budget {cfg.node_budget}")
    if M > cfg.row_budget:
        raise ResourceBudgetError(
            f"{M} rows exceed row budget {cfg.row_budget}")
    cache = model.begin_cache(M, max_len=T + 1)
    logits = cache.prefill(prefixes)[:, -1]
    _walk(model, oracle, cfg, loss, cache, logits,
          torch.ones(1, dtype=torch.float64), t + 1,
          torch.arange(M), q, err)
    return q, err


def q_values(model: StudentModel, oracle: OracleSpec, examples: list[Example], t: int,
             actions: tuple[int, ...] = EVAL_ACTIONS,
             cfg: EngineConfig = EngineConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Q(s, a) for every (example, action) at position t.

    Returns (q (n_examples, n_actions) float64, error bound (n_examples,)).
    """
    model.eval()
    T = oracle.template_length
    if not 0 <= t < T:
        raise IndexError(f"position {t} out of range")
    for a in actions:
        if a not in ACTION_COLUMN:
            raise ValueError(f"forced action {a} is not an evaluation action")
    E, A = len(examples), len(actions)
    q_out = np.zeros((E, A))
    err_out = np.zeros(E)
    if t == T - 1:
        return q_out, err_out

    loss = _StepLoss(oracle, cfg.loss_kind, cfg.loss_scale)

    # distinct prefixes share rows: early positions collapse hard
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault(tuple(ex.tokens[:t]), []).append(i)

    prefix_keys = list(groups)
    e_chunk = max(1, cfg.row_budget // A)
    for gstart in range(0, len(prefix_keys), e_chunk):
        keys = prefix_keys[gstart:gstart + e_chunk]
        rows = []
        for key in keys:
            base = (BOS,) + key
            rows.extend(base + (a,) for a in actions)
        prefixes = torch.tensor(rows, dtype=torch.long)
        q, err = _continuation_walk(model, oracle, prefixes, t, cfg, loss)
        q = q.view(len(keys), A).numpy()
        err = err.view(len(keys), A).numpy()
        for ki, key in enumerate(keys):
            for ei in groups[key]:
                q_out[ei] = q[ki]
                err_out[ei] = err[ki].max()
    return q_out, err_out


def q_value(model: StudentModel, oracle: OracleSpec, example: Example, t: int,
            action: int, cfg: EngineConfig = EngineConfig()) -> float:
    q, _ = q_values(model, oracle, [example], t, (action,), cfg)
    return float(q[0, 0])


def brute_force_q(model: StudentModel, oracle: OracleSpec, example: Example, t: int,
                  action: int, loss_kind: str = "fkl", loss_scale: float = 1.0,
                  path_guard: int = 100_000) -> float:
    """Independent oracle: fresh full forward per continuation path."""
    model.eval()
    T = oracle.template_length
    if not 0 <= t < T:
        raise IndexError(f"position {t} out of range")
    if action not in ACTION_COLUMN:
        raise ValueError(f"forced action {action} is not an evaluation action")
    if t == T - 1:
        return 0.0

    cand_lists = [oracle.schedule[p].candidates for p in range(t + 1, T - 1)]
    prob_lists = [oracle.schedule[p].probs for p in range(t + 1, T - 1)]
    n_paths = 1
    for c in cand_lists:
        n_paths *= len(c)
    if n_paths > path_guard:
        raise ResourceBudgetError(f"{n_paths} continuation paths exceed guard {path_guard}")

    base = (BOS,) + tuple(example.tokens[:t]) + (action,)
    seqs, weights = [], []
    for combo in itertools.product(*[range(len(c)) for c in cand_lists]) if cand_lists else [()]:
        toks = tuple(cand_lists[i][j] for i, j in enumerate(combo))
        w = 1.0
        for i, j in enumerate(combo):
            w *= prob_lists[i][j]
        seqs.append(base + toks)
        weights.append(w)

    step = _StepLoss(oracle, loss_kind, loss_scale)
    total = 0.0
    seq_t = torch.tensor(seqs, dtype=torch.long)
    w_t = np.asarray(weights)
    with torch.no_grad():
        for start in range(0, len(seqs), 256):
            chunk = seq_t[start:start + 256]
            logits = model(chunk)
            path_loss = torch.zeros(chunk.shape[0], dtype=torch.float64)
            for tau in range(t + 1, T):
                path_loss += step(logits[:, tau], tau)
            total += float(path_loss.numpy() @ w_t[start:start + 256])
    return total


# --- kappa ---------------------------------------------------------------------

@dataclass
class KappaTable:
    domain: str
    model_id: str
    n_examples: int
    template_length: int
    actions: tuple[int, ...]
    kappa: np.ndarray        # (E, T, 62)
    q_baseline: np.ndarray   # (E, T)
    kappa_state: np.ndarray  # (E, T)
    error_bound: np.ndarray  # (E, T)
    kinds: tuple[str, ...]   # per position
    metadata: dict = field(default_factory=dict)

    @property
    def q(self) -> np.ndarray:
        return self.kappa + self.q_baseline[:, :, None]

    def kappa_state_abs(self) -> np.ndarray:
        return np.abs(self.kappa).sum(axis=2)


def kappa_from_q(oracle: OracleSpec, t: int, q_row: np.ndarray) -> tuple[np.ndarray, float]:
    """Center Q against the teacher-weighted baseline at position t."""
    state = oracle.schedule[t]
    cols = [ACTION_COLUMN[c] for c in state.candidates]
    baseline = float(np.asarray(state.probs) @ q_row[cols])
    return q_row - baseline, baseline


def kappa_for_state(model: StudentModel, oracle: OracleSpec, example: Example, t: int,
                    cfg: EngineConfig = EngineConfig()):
    """kappa vector over the 62 evaluation actions plus the state aggregate."""
    q, err = q_values(model, oracle, [example], t, EVAL_ACTIONS, cfg)
    kappa, baseline = kappa_from_q(oracle, t, q[0])
    return kappa, float(kappa.sum()), baseline, float(err[0])


def build_kappa_table(model: StudentModel, oracle: OracleSpec, eval_examples,
                      cfg: EngineConfig = EngineConfig(),
                      resume_path=None, log=lambda msg: None) -> KappaTable:
    """Dense kappa table over all (example, position, action) triples."""
    E = len(eval_examples)
    T = oracle.template_length
    A = len(EVAL_ACTIONS)
    q_all = np.zeros((E, T, A))
    err_all = np.zeros((E, T))
    done: set[int] = set()

    resume_records: list[str] = []
    if resume_path is not None and resume_path.exists():
        for line in resume_path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            tt = rec["t"]
            q_all[rec["e"], tt] = np.array(rec["q"])
            err_all[rec["e"], tt] = rec["err"]
            resume_records.append(line)
        counts = {}
        for line in resume_records:
            tt = json.loads(line)["t"]
            counts[tt] = counts.get(tt, 0) + 1
        done = {tt for tt, c in counts.items() if c == E}
        log(f"resume: {len(done)} positions already complete")

    handle = resume_path.open("a") if resume_path is not None else None
    try:
        for t in range(T):
            if t in done:
                continue
            q, err = q_values(model, oracle, list(eval_examples), t, EVAL_ACTIONS, cfg)
            q_all[:, t] = q
            err_all[:, t] = err
            if handle is not None:
                for e in range(E):
                    handle.write(json.dumps({
                        "t": t, "e": e, "q": [float(v) for v in q[e]],
                        "err": float(err[e])}) + "\n")
                handle.flush()
            log(f"position {t + 1}/{T} done")
    finally:
        if handle is not None:
            handle.close()

    kappa = np.zeros_like(q_all)
    baseline = np.zeros((E, T))
    for t in range(T):
        for e in range(E):
            kappa[e, t], baseline[e, t] = kappa_from_q(oracle, t, q_all[e, t])
    return KappaTable(
        domain=oracle.domain,
        model_id=model.model_id(),
        n_examples=E,
        template_length=T,
        actions=EVAL_ACTIONS,
        kappa=kappa,
        q_baseline=baseline,
        kappa_state=kappa.sum(axis=2),
        error_bound=err_all,
        kinds=tuple(s.kind for s in oracle.schedule),
        metadata={
            "eps": cfg.eps, "loss_kind": cfg.loss_kind, "loss_cap": cfg.loss_cap,
            "loss_scale": cfg.loss_scale, "dtype": str(model.dtype).split(".")[-1],
        },
    )


# --- bridge/garden partition ----------------------------------------------------

@dataclass(frozen=True)
class Partition:
    bridge: tuple[tuple[int, int], ...]   # (example, position) states
    garden: tuple[tuple[int, int], ...]
    fraction: float
    exclude_terminal: bool
    size: int


def partition_bridge_garden(table: KappaTable, fraction: float = 0.20,
                            exclude_terminal: bool = False,
                            use_abs: bool = False,
                            scores: np.ndarray | None = None) -> Partition:
    """Top / bottom fraction of states ranked by the state aggregate.

    ``scores`` overrides the ranking signal (e.g. a mean over several
    models' tables for a common split); shape (E, T).
    """
    E, T = table.kappa_state.shape
    if scores is None:
        scores = table.kappa_state_abs() if use_abs else table.kappa_state
    ex_idx, pos_idx = np.meshgrid(np.arange(E), np.arange(T), indexing="ij")
    flat_scores = scores.ravel()
    flat_e = ex_idx.ravel()
    flat_t = pos_idx.ravel()
    if exclude_terminal:
        keep = flat_t < T - 1
        flat_scores, flat_e, flat_t = flat_scores[keep], flat_e[keep], flat_t[keep]
    n = flat_scores.size
    if n < 10:
        raise ValueError("too few states to partition")
    order = np.lexsort((flat_t, flat_e, -flat_scores))
    size = int(round(fraction * n))
    bridge = [(int(flat_e[i]), int(flat_t[i])) for i in order[:size]]
    garden = [(int(flat_e[i]), int(flat_t[i])) for i in order[n - size:]]
    return Partition(bridge=tuple(bridge), garden=tuple(garden),
                     fraction=fraction, exclude_terminal=exclude_terminal, size=size)


# --- kappa table file format -----------------------------------------------------

_KAPPA_MAGIC = "#kdlab-kappa-v1 "


def kappa_table_to_csv(table: KappaTable) -> str:
    header = {
        "domain": table.domain, "model_id": table.model_id,
        "n_examples": table.n_examples, "template_length": table.template_length,
        "actions": list(table.actions), "kinds": list(table.kinds),
        "metadata": table.metadata,
    }
    lines = [_KAPPA_MAGIC + json.dumps(header, sort_keys=True)]
    cols = ",".join(f"k{tok}" for tok in table.actions)
    lines.append(f"example,position,kind,kappa_state,q_baseline,error_bound,{cols}")
    for e in range(table.n_examples):
        for t in range(table.template_length):
            vals = ",".join(f"{v:.17g}" for v in table.kappa[e, t])
            lines.append(
                f"{e},{t},{table.kinds[t]},{table.kappa_state[e, t]:.17g},"
                f"{table.q_baseline[e, t]:.17g},{table.error_bound[e, t]:.17g},{vals}")
    return "\n".join(lines) + "\n"


def kappa_table_from_csv(text: str) -> KappaTable:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_KAPPA_MAGIC):
        raise ValueError("not a kappa table file")
    header = json.loads(lines[0][len(_KAPPA_MAGIC):])
    E, T = header["n_examples"], header["template_length"]
    actions = tuple(header["actions"])
    kappa = np.zeros((E, T, len(actions)))
    baseline = np.zeros((E, T))
    err = np.zeros((E, T))
    for line in lines[2:]:
        if not line.strip():
            continue
        parts = line.split(",")
        e, t = int(parts[0]), int(parts[1])
        baseline[e, t] = float(parts[4])
        err[e, t] = float(parts[5])
        kappa[e, t] = [float(v) for v in parts[6:]]
    return KappaTable(
        domain=header["domain"], model_id=header["model_id"], n_examples=E,
        template_length=T, actions=actions, kappa=kappa, q_baseline=baseline,
        kappa_state=kappa.sum(axis=2), error_bound=err,
        kinds=tuple(header["kinds"]), metadata=header["metadata"],
    )
