import time, numpy as np, torch, json
from kdlab.oracle import build_oracle, generate_dataset, HIGH_RISK, FLEXIBLE, DETERMINISTIC
from kdlab.model import ModelConfig, StudentModel, save_checkpoint
from kdlab.objectives import ObjectiveConfig
from kdlab.trainer import TrainConfig, train
from kdlab.sensitivity import build_kappa_table, EngineConfig, partition_bridge_garden
from kdlab.analysis import exposure_bias, regional_contributions, confidence_kappa_correlation
from kdlab.vocab import EVAL_ACTIONS

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
models = {}
for name, obj in [('hard', ObjectiveConfig(mode='hard')),
                  ('soft', ObjectiveConfig(mode='soft')),
                  ('hybrid', ObjectiveConfig(mode='hybrid_static', lam=0.9))]:
    t0 = time.time()
    m = StudentModel(ModelConfig(), seed=0)
    m, hist = train(m, ds, spec, obj, TrainConfig(seed=0))
    print(f'[{name}] {time.time()-t0:.0f}s best={hist.best_metric:.4f} ep={hist.stopped_epoch}', flush=True)
    open(f'/root/pkg/.pilot/p4_{name}.ckpt','wb').write(save_checkpoint(m))
    models[name] = m

eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:10])
tables = {}
for name in ('hard', 'soft', 'hybrid'):
    t0 = time.time()
    tables[name] = build_kappa_table(models[name], spec, examples, eng)
    print(f'kappa[{name}] {time.time()-t0:.0f}s', flush=True)
    np.save(f'/root/pkg/.pilot/p4_ks_{name}.npy', tables[name].kappa_state)
    np.save(f'/root/pkg/.pilot/p4_kap_{name}.npy', tables[name].kappa)

scores = np.mean([tables['hard'].kappa_state, tables['soft'].kappa_state], axis=0)
part = partition_bridge_garden(tables['hard'], fraction=0.20, scores=scores)
for name in ('hard', 'soft'):
    c = regional_contributions(models[name], tables[name], part, spec, examples)
    rho, ctb, ctg = confidence_kappa_correlation(spec, tables[name], part)
    eb = exposure_bias(models[name], spec, ds.eval, repeats=30, seed=0)
    print(f'[{name}] bridge={c["bridge"]:.5f} garden={c["garden"]:.5f} eb={eb.eb:.5f} '
          f'rho={rho:.3f} ct_bridge={ctb:.3f} ct_garden={ctg:.3f}', flush=True)
eb_h = exposure_bias(models['hybrid'], spec, ds.eval, repeats=30, seed=0)
print(f'[hybrid] eb={eb_h.eb:.5f}', flush=True)

# bridge composition + heatmap concentration stats on the hybrid table
kinds = [s.kind for s in spec.schedule]
bridge_kinds = {}
for e, t in part.bridge:
    bridge_kinds[kinds[t]] = bridge_kinds.get(kinds[t], 0) + 1
print('bridge composition:', bridge_kinds, flush=True)
kabs = np.abs(tables['hybrid'].kappa)   # (E, T, 62)
dec = list(spec.decision_positions)
others = [t for t in range(spec.template_length) if t not in dec]
g0 = kabs[0]
print(f'hybrid ex0: mean|k| decision rows={g0[dec].mean():.5f} other rows={g0[others].mean():.5f} '
      f'row-max argsort top8={list(np.argsort(g0.max(axis=1))[-8:])} decisions={dec}', flush=True)
per_row = kabs.mean(axis=(0, 2))
print('per-position mean |kappa| (all examples):')
for t in range(spec.template_length):
    marker = {'high_risk':'HR','flexible':'FL','deterministic':'  '}[kinds[t]]
    print(f'  t={t:2d} {marker} {per_row[t]:.5f}', flush=True)
