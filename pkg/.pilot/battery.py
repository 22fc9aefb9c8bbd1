import time, numpy as np, torch, math, copy, sys
from kdlab.oracle import build_oracle, generate_dataset
from kdlab.model import ModelConfig, StudentModel
from kdlab.objectives import ObjectiveConfig
from kdlab.trainer import TrainConfig, train
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q, ACTION_COLUMN
from kdlab.vocab import EVAL_ACTIONS
from kdlab.analysis import confidence, spearman

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])
CHOICE = [t for t in range(spec.template_length) if spec.schedule[t].is_choice]

def evaluate(m, label):
    ks = np.zeros((6, len(CHOICE))); cand = {}; garb = {}
    for ci, t in enumerate(CHOICE):
        st = spec.schedule[t]
        q, _ = q_values(m, spec, examples, t, EVAL_ACTIONS, eng)
        cc = [ACTION_COLUMN[c] for c in st.candidates]
        gc = [i for i in range(62) if i not in cc]
        for e in range(6):
            kap, _ = kappa_from_q(spec, t, q[e])
            ks[e, ci] = kap.sum()
        kap, _ = kappa_from_q(spec, t, q[0])
        cand[t] = kap[cc].sum(); garb[t] = kap[gc].sum()
    xs = [confidence(spec, t) for t in CHOICE for e in range(6)]
    ys = [ks[e, ci] for ci, t in enumerate(CHOICE) for e in range(6)]
    rho = spearman(xs, ys)
    # deterministic-state garbage level at two positions
    dvals = []
    for t in (10, 20):
        q, _ = q_values(m, spec, examples[:2], t, EVAL_ACTIONS, eng)
        kap, _ = kappa_from_q(spec, t, q[0])
        dvals.append(kap.sum())
    per_state = ' '.join(f'{t}:{ks[:, ci].mean():.2f}' for ci, t in enumerate(CHOICE))
    print(f'[{label}] rho={rho:.3f} choice_ks {per_state} det_ks={np.mean(dvals):.1f} '
          f'cand(t=4)={cand[4]:.4f} garb(t=4)={garb[4]:.2f}', flush=True)

def run(label, dropout=0.1, epochs=24, warmup=6, wd=0.01, tie=False):
    t0 = time.time()
    cfg = ModelConfig(dropout_rate=dropout)
    m = StudentModel(cfg, seed=0)
    if tie:
        with torch.no_grad():
            m.head.weight = m.tok_emb.weight
    tc = TrainConfig(seed=0, max_epochs=epochs, warmup_epochs=warmup, weight_decay=wd)
    m, hist = train(m, ds, spec, ObjectiveConfig(mode='hard'), tc)
    print(f'[{label}] trained {time.time()-t0:.0f}s TFKL={hist.best_metric:.4f} ep={hist.stopped_epoch}', flush=True)
    m.eval()
    evaluate(m, label)

run('base24', dropout=0.1)
run('nodrop24', dropout=0.0)
run('wd0.1', wd=0.1)
run('tie', tie=True)
run('long200', epochs=200, warmup=12)
