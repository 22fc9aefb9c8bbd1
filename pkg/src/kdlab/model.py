"""Two-layer autoregressive transformer student with an incremental cache.

Two forward paths share the same arithmetic:

* ``StudentModel.forward`` — functional, autograd-friendly, full-sequence
  causal attention; used for training, gradient checks, and the brute-force
  sensitivity oracle.
* ``InferenceCache`` + ``prefill``/``extend`` — eval-only, no_grad, writes
  keys/values into preallocated buffers; used for rollouts and continuation
  tree enumeration.  Keys are stored pre-transposed (batch, heads, d_head,
  time) so the per-token attention GEMM never re-strides the cache.

Pre-norm residual blocks, learned positional embeddings, no weight tying.
Dropout is token-level (random input replacement) and only exists in the
training path; it takes an explicit generator so runs are reproducible.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocab import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    model_width: int = 128
    heads: int = 4
    ffn_width: int = 512
    dropout_rate: float = 0.1
    vocab: int = VOCAB_SIZE
    max_positions: int = 64

    def __post_init__(self):
        if self.model_width % self.heads != 0:
            raise ValueError("model_width must be divisible by heads")

    @property
    def head_width(self) -> int:
        return self.model_width // self.heads


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.model_width
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.ffn_width)
        self.ff2 = nn.Linear(cfg.ffn_width, d)


def _token_dropout(tokens: torch.Tensor, rate: float, vocab: int,
                   rng: torch.Generator | None) -> torch.Tensor:
    """Replace input tokens (never the leading BOS) with uniform-random ones.

    Token-level dropout rather than activation dropout: the sensitivity
    analysis interrogates the student off the teacher manifold, so the
    regularizer must expose it to corrupted prefixes during training.
    Activation dropout at the same rate was tried first and it scrambles the
    content-sensitivity structure that the risk measurements rely on.
    """
    if rng is None or rate <= 0.0:
        return tokens
    mask = torch.rand(tokens.shape, generator=rng) < rate
    mask[:, 0] = False
    noise = torch.randint(0, vocab, tokens.shape, generator=rng)
    return torch.where(mask, noise, tokens)


class StudentModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.model_width)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.model_width)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.model_width)
        self.head = nn.Linear(cfg.model_width, cfg.vocab)
        self.to(dtype)
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.dim() >= 2 or "emb" in name:
                    values = torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.02
                    p.copy_(values.to(p.dtype))
                elif "ln" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, tokens: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        """Causal logits for every position.  ``rng`` enables dropout (train mode)."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        B, T = tokens.shape
        cfg = self.cfg
        if T > cfg.max_positions:
            raise ValueError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
        tokens = _token_dropout(tokens, cfg.dropout_rate, cfg.vocab, rng)
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T))
        mask = torch.full((T, T), float("-inf"), dtype=x.dtype).triu(1)
        h, dh = cfg.heads, cfg.head_width
        for blk in self.blocks:
            q, k, v = blk.qkv(blk.ln1(x)).split(cfg.model_width, dim=-1)
            q = q.view(B, T, h, dh).transpose(1, 2)
            k = k.view(B, T, h, dh).transpose(1, 2)
            v = v.view(B, T, h, dh).transpose(1, 2)
            att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh) + mask, dim=-1)
            x = x + blk.proj((att @ v).transpose(1, 2).reshape(B, T, cfg.model_width))
            x = x + blk.ff2(F.gelu(blk.ff1(blk.ln2(x))))
        return self.head(self.ln_f(x))

    # --- incremental path ----------------------------------------------------

    def begin_cache(self, batch: int, max_len: int | None = None) -> "InferenceCache":
        return InferenceCache(self, batch, max_len or self.cfg.max_positions)

    def model_id(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(asdict(self.cfg), sort_keys=True).encode())
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().to(torch.float64).numpy().tobytes())
        return digest.hexdigest()[:16]


class InferenceCache:
    """Preallocated per-layer key/value store for one batch of prefixes.

    All rows share a committed length.  Forking (``repeat_nodes`` /
    ``select_rows``) copies only committed columns.
    """

    def __init__(self, model: StudentModel, batch: int, max_len: int):
        cfg = model.cfg
        if max_len > cfg.max_positions:
            raise ValueError("cache max_len exceeds model max_positions")
        self.model = model
        self.batch = batch
        self.max_len = max_len
        self.length = 0
        dt = model.dtype
        h, dh = cfg.heads, cfg.head_width
        # keys pre-transposed: (B, h, dh, time)
        self.kt = [torch.zeros(batch, h, dh, max_len, dtype=dt) for _ in range(cfg.layers)]
        self.v = [torch.zeros(batch, h, max_len, dh, dtype=dt) for _ in range(cfg.layers)]

    @torch.no_grad()
    def prefill(self, tokens: torch.Tensor) -> torch.Tensor:
        """Append a chunk of tokens per row; returns logits (B, R, vocab).

        Row ``j`` of the result is the next-token logits after consuming
        tokens[:, : j + 1] on top of the previously committed prefix.
        """
        model, cfg = self.model, self.model.cfg
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(1)
        B, R = tokens.shape
        if B != self.batch:
            raise ValueError("token batch does not match cache batch")
        m = self.length
        if m + R > self.max_len:
            raise ValueError(f"cache capacity exceeded ({m}+{R}>{self.max_len})")
        h, dh = cfg.heads, cfg.head_width
        x = model.tok_emb(tokens) + model.pos_emb(torch.arange(m, m + R))
        if R > 1:
            mask = torch.full((R, R), float("-inf"), dtype=x.dtype).triu(1)
        for li, blk in enumerate(model.blocks):
            q, k, v = blk.qkv(blk.ln1(x)).split(cfg.model_width, dim=-1)
            self.kt[li][:, :, :, m:m + R] = k.view(B, R, h, dh).permute(0, 2, 3, 1)
            self.v[li][:, :, m:m + R] = v.view(B, R, h, dh).transpose(1, 2)
            q = q.view(B, R, h, dh).transpose(1, 2)
            scores = q @ self.kt[li][:, :, :, :m + R] / math.sqrt(dh)
            if R > 1:
                scores[:, :, :, m:] += mask
            att = torch.softmax(scores, dim=-1)
            x = x + blk.proj((att @ self.v[li][:, :, :m + R]).transpose(1, 2).reshape(B, R, cfg.model_width))
            x = x + blk.ff2(F.gelu(blk.ff1(blk.ln2(x))))
        self.length = m + R
        return model.head(model.ln_f(x))

    @torch.no_grad()
    def extend(self, tokens: torch.Tensor) -> torch.Tensor:
        """Append one token per row; returns next-token logits (B, vocab)."""
        return self.prefill(tokens.view(-1, 1))[:, 0]

    @torch.no_grad()
    def fork(self) -> "InferenceCache":
        other = InferenceCache(self.model, self.batch, self.max_len)
        m = self.length
        for li in range(len(self.kt)):
            other.kt[li][:, :, :, :m] = self.kt[li][:, :, :, :m]
            other.v[li][:, :, :m] = self.v[li][:, :, :m]
        other.length = m
        return other

    @torch.no_grad()
    def repeat_nodes(self, group: int, copies: int) -> "InferenceCache":
        """Repeat each block of ``group`` consecutive rows ``copies`` times."""
        if self.batch % group != 0:
            raise ValueError("batch not divisible by node group size")
        n = self.batch // group
        other = InferenceCache(self.model, self.batch * copies, self.max_len)
        m = self.length
        for li in range(len(self.kt)):
            src = self.kt[li][:, :, :, :m].reshape(n, group, *self.kt[li].shape[1:3], m)
            other.kt[li][:, :, :, :m] = (
                src.repeat_interleave(copies, dim=0).reshape(n * copies * group, *self.kt[li].shape[1:3], m))
            srcv = self.v[li][:, :, :m].reshape(n, group, self.v[li].shape[1], m, self.v[li].shape[3])
            other.v[li][:, :, :m] = (
                srcv.repeat_interleave(copies, dim=0).reshape(n * copies * group, self.v[li].shape[1], m, self.v[li].shape[3]))
        other.length = m
        return other

    @torch.no_grad()
    def select_rows(self, index: torch.Tensor) -> "InferenceCache":
        other = InferenceCache(self.model, int(index.numel()), self.max_len)
        m = self.length
        for li in range(len(self.kt)):
            other.kt[li][:, :, :, :m] = self.kt[li][index][:, :, :, :m]
            other.v[li][:, :, :m] = self.v[li][index][:, :, :m]
        other.length = m
        return other


def init_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> StudentModel:
    return StudentModel(cfg, seed, dtype=dtype)


def student_distribution(model: StudentModel, prefix: torch.Tensor) -> torch.Tensor:
    """Next-token probabilities (float64) after the given prefix."""
    with torch.no_grad():
        logits = model(prefix)[..., -1, :]
    return torch.softmax(logits.to(torch.float64), dim=-1)


# --- checkpoint format --------------------------------------------------------

_MAGIC = b"KDLAB-CKPT-1\n"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def save_checkpoint(model: StudentModel, extra: dict | None = None) -> bytes:
    names = sorted(name for name, _ in model.named_parameters())
    params = dict(model.named_parameters())
    header = {
        "config": asdict(model.cfg),
        "seed": model.seed,
        "dtype": str(model.dtype).split(".")[-1],
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    for n in names:
        buf.write(params[n].detach().contiguous().numpy().tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> tuple[StudentModel, dict]:
    if not data.startswith(_MAGIC):
        raise ValueError("not a model checkpoint")
    body = data[len(_MAGIC):]
    nl = body.index(b"\n")
    header = json.loads(body[:nl].decode())
    dtype = _DTYPES[header["dtype"]]
    model = StudentModel(ModelConfig(**header["config"]), header["seed"], dtype=dtype)
    params = dict(model.named_parameters())
    offset = nl + 1
    itemsize = 4 if dtype == torch.float32 else 8
    for spec in header["tensors"]:
        p = params[spec["name"]]
        n_bytes = p.numel() * itemsize
        chunk = body[offset:offset + n_bytes]
        if len(chunk) != n_bytes:
            raise ValueError("truncated checkpoint")
        with torch.no_grad():
            p.copy_(torch.frombuffer(bytearray(chunk), dtype=dtype).view(p.shape))
        offset += n_bytes
    if offset != len(body):
        raise ValueError("trailing bytes in checkpoint")
    return model, header["extra"]
