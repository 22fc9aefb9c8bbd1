import time, numpy as np, torch
from kdlab.oracle import build_oracle, generate_dataset
from kdlab.model import ModelConfig, StudentModel, _dropout
import kdlab.model as model_mod
from kdlab.objectives import ObjectiveConfig
from kdlab.trainer import TrainConfig, train
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q, ACTION_COLUMN
from kdlab.vocab import EVAL_ACTIONS
from kdlab.analysis import confidence, spearman
import math, torch.nn.functional as F

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])
CHOICE = [t for t in range(spec.template_length) if spec.schedule[t].is_choice]

def evaluate(m, label):
    ks = np.zeros((6, len(CHOICE)))
    for ci, t in enumerate(CHOICE):
        q, _ = q_values(m, spec, examples, t, EVAL_ACTIONS, eng)
        for e in range(6):
            kap, _ = kappa_from_q(spec, t, q[e])
            ks[e, ci] = kap.sum()
    xs = [confidence(spec, t) for t in CHOICE for e in range(6)]
    ys = [ks[e, ci] for ci, t in enumerate(CHOICE) for e in range(6)]
    rho = spearman(xs, ys)
    per_state = ' '.join(f'{t}:{ks[:, ci].mean():.2f}' for ci, t in enumerate(CHOICE))
    print(f'[{label}] rho={rho:.3f} choice_ks {per_state}', flush=True)

# patch dropout placement via a forward-mode switch on the module
PLACEMENT = {'mode': 'gpt2'}
orig_forward = StudentModel.forward
def forward_variant(self, tokens, rng=None):
    if tokens.dim() == 1: tokens = tokens.unsqueeze(0)
    B, T = tokens.shape
    cfg = self.cfg; rate = cfg.dropout_rate
    mode = PLACEMENT['mode']
    x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T))
    if mode in ('gpt2', 'emb'):
        x = _dropout(x, rate, rng)
    mask = torch.full((T, T), float('-inf'), dtype=x.dtype).triu(1)
    h, dh = cfg.heads, cfg.head_width
    for blk in self.blocks:
        q, k, v = blk.qkv(blk.ln1(x)).split(cfg.model_width, dim=-1)
        q = q.view(B, T, h, dh).transpose(1, 2); k = k.view(B, T, h, dh).transpose(1, 2); v = v.view(B, T, h, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh) + mask, dim=-1)
        if mode in ('gpt2', 'attn'):
            att = _dropout(att, rate, rng)
        y = blk.proj((att @ v).transpose(1, 2).reshape(B, T, cfg.model_width))
        if mode == 'gpt2': y = _dropout(y, rate, rng)
        x = x + y
        z = F.gelu(blk.ff1(blk.ln2(x)))
        if mode == 'ffn': z = _dropout(z, rate, rng)
        z = blk.ff2(z)
        if mode == 'gpt2': z = _dropout(z, rate, rng)
        x = x + z
    return self.head(self.ln_f(x))
StudentModel.forward = forward_variant

def run(label, mode, rate):
    PLACEMENT['mode'] = mode
    t0 = time.time()
    m = StudentModel(ModelConfig(dropout_rate=rate), seed=0)
    m, hist = train(m, ds, spec, ObjectiveConfig(mode='hard'), TrainConfig(seed=0))
    print(f'[{label}] trained {time.time()-t0:.0f}s TFKL={hist.best_metric:.4f}', flush=True)
    evaluate(m, label)

run('attn_only_0.1', 'attn', 0.1)
run('ffn_only_0.1', 'ffn', 0.1)
run('gpt2_0.05', 'gpt2', 0.05)
run('emb_only_0.1', 'emb', 0.1)
