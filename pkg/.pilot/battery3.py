import time, numpy as np, torch, math
from kdlab.oracle import build_oracle, generate_dataset
from kdlab.model import ModelConfig, StudentModel
from kdlab.objectives import ObjectiveConfig
from kdlab.trainer import TrainConfig
import kdlab.trainer as trainer_mod
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q, ACTION_COLUMN
from kdlab.vocab import EVAL_ACTIONS, BOS
from kdlab.analysis import confidence, spearman

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])
CHOICE = [t for t in range(spec.template_length) if spec.schedule[t].is_choice]

# word dropout: replace non-BOS input tokens with uniform-random tokens
WORD_RATE = {'p': 0.1}
import kdlab.trainer as tm
orig_train = tm.train
def train_word_dropout(model, dataset, oracle, objective, cfg, criterion=None):
    # monkeypatch model.forward to corrupt inputs when rng is given
    orig_forward = type(model).forward
    def fw(self, tokens, rng=None):
        if rng is not None and WORD_RATE['p'] > 0:
            mask = torch.rand(tokens.shape, generator=rng) < WORD_RATE['p']
            mask[:, 0] = False  # keep BOS
            noise = torch.randint(0, 64, tokens.shape, generator=rng)
            tokens = torch.where(mask, noise, tokens)
        return orig_forward(self, tokens, rng=rng)
    type(model).forward = fw
    try:
        return orig_train(model, dataset, oracle, objective, cfg, criterion=criterion)
    finally:
        type(model).forward = orig_forward

def evaluate(m, label):
    ks = np.zeros((6, len(CHOICE))); per_action = {}
    for ci, t in enumerate(CHOICE):
        q, _ = q_values(m, spec, examples, t, EVAL_ACTIONS, eng)
        for e in range(6):
            kap, _ = kappa_from_q(spec, t, q[e])
            ks[e, ci] = kap.sum()
        st = spec.schedule[t]
        kap, _ = kappa_from_q(spec, t, q[0])
        cc = [ACTION_COLUMN[c] for c in st.candidates]
        gc = [i for i in range(62) if i not in cc]
        per_action[t] = (kap[cc].sum(), kap[gc].sum())
    xs = [confidence(spec, t) for t in CHOICE for e in range(6)]
    ys = [ks[e, ci] for ci, t in enumerate(CHOICE) for e in range(6)]
    rho = spearman(xs, ys)
    dvals = []
    for t in (10, 20):
        q, _ = q_values(m, spec, examples[:2], t, EVAL_ACTIONS, eng)
        kap, _ = kappa_from_q(spec, t, q[0])
        dvals.append(kap.sum())
    per_state = ' '.join(f'{t}:{ks[:, ci].mean():.2f}' for ci, t in enumerate(CHOICE))
    pa = ' '.join(f'{t}:(c{1000*c:.0f},g{1000*g:.0f})' for t, (c, g) in per_action.items())
    print(f'[{label}] rho={rho:.3f} ks {per_state} det_ks={np.mean(dvals):.2f}', flush=True)
    print(f'[{label}] per-action milli-kappa (cand,garb): {pa}', flush=True)

def run(label, word_p, std_dropout):
    WORD_RATE['p'] = word_p
    t0 = time.time()
    m = StudentModel(ModelConfig(dropout_rate=std_dropout), seed=0)
    m, hist = train_word_dropout(m, ds, spec, ObjectiveConfig(mode='hard'), TrainConfig(seed=0))
    print(f'[{label}] trained {time.time()-t0:.0f}s TFKL={hist.best_metric:.4f}', flush=True)
    m.eval(); evaluate(m, label)

run('word0.1_nostd', 0.1, 0.0)
run('word0.1_std0.1', 0.1, 0.1)
run('word0.05_nostd', 0.05, 0.0)
