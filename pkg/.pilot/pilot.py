import time, torch, numpy as np
from kdlab.oracle import build_oracle, generate_dataset, HIGH_RISK, FLEXIBLE
from kdlab.model import ModelConfig, StudentModel, save_checkpoint
from kdlab.objectives import ObjectiveConfig
from kdlab.trainer import TrainConfig, train
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q
from kdlab.vocab import EVAL_ACTIONS
from kdlab.analysis import confidence, spearman

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
t0 = time.time()
m = StudentModel(ModelConfig(), seed=0)
m, hist = train(m, ds, spec, ObjectiveConfig(mode='hard'), TrainConfig(seed=0))
print(f'trained hard KD dialogue in {time.time()-t0:.0f}s best={hist.best_metric:.4f} stop={hist.stopped_epoch}', flush=True)
open('/root/pkg/.pilot/hard_dialogue.ckpt','wb').write(save_checkpoint(m))

# kappa on 6 eval examples, pruned
eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])
T = spec.template_length
t0 = time.time()
ks = np.zeros((len(examples), T))
for t in range(T):
    q, err = q_values(m, spec, examples, t, EVAL_ACTIONS, eng)
    for e in range(len(examples)):
        kap, _ = kappa_from_q(spec, t, q[e])
        ks[e, t] = kap.sum()
    if t % 8 == 0: print(f'  t={t} done {time.time()-t0:.0f}s', flush=True)
print(f'kappa subset in {time.time()-t0:.0f}s', flush=True)

np.save('/root/pkg/.pilot/ks.npy', ks)
kinds = [s.kind for s in spec.schedule]
print('mean kappa(s) by position:')
for t in range(T):
    print(f'  t={t:2d} {kinds[t][:4]:4s} role={spec.schedule[t].role[:12]:12s} mean_ks={ks[:,t].mean():.4f}')
choice = [t for t in range(T) if spec.schedule[t].is_choice]
xs = [confidence(spec, t) for t in choice for e in range(len(examples))]
ys = [ks[e, t] for t in choice for e in range(len(examples))]
print('pilot spearman(cT, kappa_s) over choice states:', spearman(xs, ys))
