import time, numpy as np, torch
from kdlab.oracle import build_oracle, generate_dataset
from kdlab.model import ModelConfig, StudentModel, save_checkpoint
from kdlab.objectives import ObjectiveConfig
from kdlab.trainer import TrainConfig, train
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q, ACTION_COLUMN
from kdlab.vocab import EVAL_ACTIONS
from kdlab.analysis import confidence, spearman

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
t0 = time.time()
m = StudentModel(ModelConfig(), seed=0)
m, hist = train(m, ds, spec, ObjectiveConfig(mode='hard'), TrainConfig(seed=0))
print(f'gpt2-dropout hard KD: {time.time()-t0:.0f}s best TFKL={hist.best_metric:.4f} stop={hist.stopped_epoch}', flush=True)
open('/root/pkg/.pilot/hard_dialogue2.ckpt','wb').write(save_checkpoint(m))

eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])
rows = {}
for t in [2, 4, 6, 15, 30, 32, 33]:
    st = spec.schedule[t]
    q, _ = q_values(m, spec, examples, t, EVAL_ACTIONS, eng)
    ks, cand, garb = [], [], []
    for e in range(6):
        kap, base = kappa_from_q(spec, t, q[e])
        cc = [ACTION_COLUMN[c] for c in st.candidates]
        gc = [i for i in range(62) if i not in cc]
        ks.append(kap.sum()); cand.append(kap[cc].sum()); garb.append(kap[gc].sum())
    rows[t] = (np.mean(ks), np.mean(cand), np.mean(garb))
    print(f't={t:2d} {st.kind[:4]} main={max(st.probs):.2f} ks={np.mean(ks):8.3f} cand={np.mean(cand):8.4f} garb={np.mean(garb):8.3f}', flush=True)
