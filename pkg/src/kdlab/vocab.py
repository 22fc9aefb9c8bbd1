"""Shared token vocabulary: 64 tokens with fixed PAD/BOS/EOS slots.

The evaluation action set is everything a rollout or an override is allowed
to emit: all 62 tokens except PAD and BOS (EOS is included).
"""

from dataclasses import dataclass, field

PAD = 0
BOS = 1
EOS = 2
VOCAB_SIZE = 64

EVAL_ACTIONS: tuple[int, ...] = tuple(i for i in range(VOCAB_SIZE) if i not in (PAD, BOS))


@dataclass(frozen=True)
class Vocab:
    size: int = VOCAB_SIZE
    pad: int = PAD
    bos: int = BOS
    eos: int = EOS
    eval_actions: tuple[int, ...] = field(default=EVAL_ACTIONS)

    def __post_init__(self):
        if self.size != 64:
            raise ValueError(f"vocabulary size must be 64, got {self.size}")
        if len(self.eval_actions) != 62:
            raise ValueError("eval action set must contain exactly 62 tokens")
        if self.eos not in self.eval_actions:
            raise ValueError("EOS must be an evaluation action")
        if self.pad in self.eval_actions or self.bos in self.eval_actions:
            raise ValueError("PAD and BOS are excluded from evaluation actions")


VOCAB = Vocab()
