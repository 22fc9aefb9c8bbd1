"""Scripted position-indexed teacher oracles and dataset generation.

Each domain (dialogue / math / code) is a fixed-length template whose
positions are typed:

* high-risk: 4 candidate tokens, main-token probability decaying
  0.98, 0.97, ... (floor 0.94) across the high-risk states of the template,
  remainder shared equally by the other three candidates;
* flexible: 8 candidate tokens with softmax probabilities of logits evenly
  spaced from 0 to -2.5;
* deterministic: a single scheduled token (template filler, final EOS).

The teacher's next-token distribution depends only on the position, never on
prefix content, so it stays well defined on off-template prefixes (needed for
rollout evaluation and forced-token interventions).  Candidate sets at
distinct decision positions are disjoint; filler tokens come from the
leftover vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .vocab import BOS, EOS, PAD, VOCAB_SIZE

HIGH_RISK = "high_risk"
FLEXIBLE = "flexible"
DETERMINISTIC = "deterministic"
CHOICE = "choice"  # free-form branching, used by reduced test oracles

DOMAINS = ("dialogue", "math", "code")

HIGH_RISK_MAIN_START = 0.98
HIGH_RISK_MAIN_DECAY = 0.01
HIGH_RISK_MAIN_FLOOR = 0.94
PROB_ATOL = 1e-12

TRAIN_SIZE = 4000
VAL_SIZE = 500
EVAL_SIZE = 30

# (kind, role, position) per domain, in fixed decision order.  Positions were
# chosen so that exact sensitivity enumeration stays tractable: large
# branching products only multiply the few template levels beneath them.
_TEMPLATES: dict[str, tuple[int, list[tuple[str, str, int]]]] = {
    "dialogue": (35, [
        (FLEXIBLE, "tone", 2),
        (HIGH_RISK, "recipient", 4),
        (HIGH_RISK, "required_fact", 6),
        (FLEXIBLE, "tone", 30),
        (HIGH_RISK, "date_time", 32),
        (HIGH_RISK, "forbidden_constraint", 33),
    ]),
    "math": (43, [
        (HIGH_RISK, "substitution", 2),
        (FLEXIBLE, "equivalent_form", 4),
        (HIGH_RISK, "operator", 26),
        (HIGH_RISK, "computed_value", 28),
        (HIGH_RISK, "final_answer", 40),
        (FLEXIBLE, "equivalent_form", 41),
    ]),
    "code": (47, [
        (FLEXIBLE, "implementation", 2),
        (FLEXIBLE, "implementation", 4),
        (FLEXIBLE, "implementation", 6),
        (HIGH_RISK, "operator", 42),
        (HIGH_RISK, "branch_guard", 43),
        (HIGH_RISK, "operator", 44),
        (HIGH_RISK, "return_semantics", 45),
    ]),
}


def flexible_probs() -> np.ndarray:
    """Softmax of 8 logits evenly spaced from 0 to -2.5."""
    z = np.exp(np.linspace(0.0, -2.5, 8))
    return z / z.sum()


def high_risk_probs(main: float) -> np.ndarray:
    return np.array([main] + [(1.0 - main) / 3.0] * 3)


@dataclass(frozen=True)
class StateSpec:
    kind: str
    candidates: tuple[int, ...]
    probs: tuple[float, ...]
    role: str = ""

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(int(c) for c in self.candidates))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        expected = {HIGH_RISK: 4, FLEXIBLE: 8, DETERMINISTIC: 1}
        if self.kind not in expected and self.kind != CHOICE:
            raise ValueError(f"unknown state kind {self.kind!r}")
        if self.kind in expected and len(self.candidates) != expected[self.kind]:
            raise ValueError(
                f"{self.kind} state needs {expected[self.kind]} candidates, got {len(self.candidates)}")
        if self.kind == CHOICE and len(self.candidates) < 2:
            raise ValueError("choice states need at least 2 candidates")
        if len(self.candidates) != len(set(self.candidates)):
            raise ValueError("candidate tokens must be distinct")
        if len(self.probs) != len(self.candidates):
            raise ValueError("probs and candidates must align")
        if abs(sum(self.probs) - 1.0) > PROB_ATOL:
            raise ValueError(f"probs must sum to 1, got {sum(self.probs)}")

    @property
    def is_choice(self) -> bool:
        return len(self.candidates) >= 2


@dataclass(frozen=True)
class OracleSpec:
    domain: str
    template_length: int
    schedule: tuple[StateSpec, ...]
    decision_positions: tuple[int, ...]

    def __post_init__(self):
        if len(self.schedule) != self.template_length:
            raise ValueError("schedule length must equal template length")
        last = self.schedule[-1]
        if last.kind != DETERMINISTIC or last.candidates != (EOS,):
            raise ValueError("final scheduled token must be a deterministic EOS")

    @property
    def choice_positions(self) -> tuple[int, ...]:
        return tuple(t for t in self.decision_positions if self.schedule[t].is_choice)

    def distribution_matrix(self) -> np.ndarray:
        """Dense (template_length, 64) teacher distribution, float64."""
        mat = np.zeros((self.template_length, VOCAB_SIZE))
        for t, state in enumerate(self.schedule):
            mat[t, list(state.candidates)] = state.probs
        return mat


@dataclass(frozen=True)
class Example:
    domain: str
    tokens: tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class Dataset:
    domain: str
    seed: int
    train: tuple[Example, ...]
    val: tuple[Example, ...]
    eval: tuple[Example, ...]

    def split(self, name: str) -> tuple[Example, ...]:
        if name not in ("train", "val", "eval"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def build_oracle(domain: str) -> OracleSpec:
    """Construct the scripted teacher for one of the three domains."""
    if domain not in _TEMPLATES:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    length, decisions = _TEMPLATES[domain]

    # Disjoint candidate sets drawn from tokens 3.. in decision order; filler
    # positions cycle through whatever remains.
    next_token = 3
    schedule: list[StateSpec | None] = [None] * length
    main = HIGH_RISK_MAIN_START
    for kind, role, pos in decisions:
        if kind == HIGH_RISK:
            probs = high_risk_probs(max(main, HIGH_RISK_MAIN_FLOOR))
            main = round(main - HIGH_RISK_MAIN_DECAY, 10)
            width = 4
        else:
            probs = flexible_probs()
            width = 8
        cands = tuple(range(next_token, next_token + width))
        next_token += width
        schedule[pos] = StateSpec(kind, cands, tuple(probs), role=role)

    filler_pool = list(range(next_token, VOCAB_SIZE))
    if not filler_pool:
        raise ValueError("vocabulary exhausted by decision candidates")
    for t in range(length - 1):
        if schedule[t] is None:
            tok = filler_pool[t % len(filler_pool)]
            schedule[t] = StateSpec(DETERMINISTIC, (tok,), (1.0,), role="filler")
    schedule[length - 1] = StateSpec(DETERMINISTIC, (EOS,), (1.0,), role="eos")

    return OracleSpec(
        domain=domain,
        template_length=length,
        schedule=tuple(schedule),
        decision_positions=tuple(pos for _, _, pos in decisions),
    )


def teacher_distribution(spec: OracleSpec, position: int) -> np.ndarray:
    """Teacher next-token distribution (length 64) at a template position."""
    if not 0 <= position < spec.template_length:
        raise IndexError(f"position {position} out of range [0, {spec.template_length})")
    out = np.zeros(VOCAB_SIZE)
    state = spec.schedule[position]
    out[list(state.candidates)] = state.probs
    return out


def sample_example(spec: OracleSpec, seed: int) -> Example:
    rng = np.random.Generator(np.random.PCG64(seed))
    return _sample_with(spec, rng, seed)


def _sample_with(spec: OracleSpec, rng: np.random.Generator, seed: int) -> Example:
    tokens = []
    for state in spec.schedule:
        if state.kind == DETERMINISTIC:
            tokens.append(state.candidates[0])
        else:
            idx = rng.choice(len(state.candidates), p=np.asarray(state.probs))
            tokens.append(state.candidates[idx])
    return Example(domain=spec.domain, tokens=tuple(tokens), seed=seed)


def generate_dataset(spec: OracleSpec, seed: int) -> Dataset:
    """4000/500/30 split with an independent RNG stream per split."""
    streams = np.random.SeedSequence(seed).spawn(3)
    sizes = (TRAIN_SIZE, VAL_SIZE, EVAL_SIZE)
    splits = []
    for ss, size in zip(streams, sizes):
        rng = np.random.Generator(np.random.PCG64(ss))
        splits.append(tuple(_sample_with(spec, rng, seed) for _ in range(size)))
    return Dataset(domain=spec.domain, seed=seed, train=splits[0], val=splits[1], eval=splits[2])


def validate_example(spec: OracleSpec, example: Example) -> None:
    if len(example.tokens) != spec.template_length:
        raise ValueError("example length does not match template")
    for t, tok in enumerate(example.tokens):
        if tok not in spec.schedule[t].candidates:
            raise ValueError(f"token {tok} at position {t} is not a scheduled candidate")


# --- serialization -----------------------------------------------------------

def oracle_to_json(spec: OracleSpec) -> str:
    doc = {
        "domain": spec.domain,
        "template_length": spec.template_length,
        "decision_positions": list(spec.decision_positions),
        "schedule": [
            {
                "position": t,
                "kind": s.kind,
                "role": s.role,
                "candidates": list(s.candidates),
                "probs": [repr(p) for p in s.probs],
            }
            for t, s in enumerate(spec.schedule)
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def oracle_from_json(text: str) -> OracleSpec:
    doc = json.loads(text)
    schedule = []
    for entry in sorted(doc["schedule"], key=lambda e: e["position"]):
        schedule.append(StateSpec(
            kind=entry["kind"],
            candidates=tuple(entry["candidates"]),
            probs=tuple(float(p) for p in entry["probs"]),
            role=entry.get("role", ""),
        ))
    return OracleSpec(
        domain=doc["domain"],
        template_length=doc["template_length"],
        schedule=tuple(schedule),
        decision_positions=tuple(doc["decision_positions"]),
    )


def dataset_to_jsonl(dataset: Dataset) -> str:
    lines = []
    for split in ("train", "val", "eval"):
        for ex in dataset.split(split):
            lines.append(json.dumps({
                "domain": ex.domain,
                "split": split,
                "seed": ex.seed,
                "tokens": list(ex.tokens),
            }, sort_keys=True))
    return "\n".join(lines) + "\n"


def dataset_from_jsonl(text: str, domain: str, seed: int) -> Dataset:
    splits: dict[str, list[Example]] = {"train": [], "val": [], "eval": []}
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        splits[rec["split"]].append(Example(
            domain=rec["domain"], tokens=tuple(rec["tokens"]), seed=rec["seed"]))
    return Dataset(domain=domain, seed=seed,
                   train=tuple(splits["train"]), val=tuple(splits["val"]),
                   eval=tuple(splits["eval"]))
