import time, numpy as np, torch
from kdlab.oracle import build_oracle, generate_dataset
from kdlab.model import ModelConfig, StudentModel, save_checkpoint
from kdlab.objectives import ObjectiveConfig, batch_objective, position_lambdas
from kdlab.trainer import TrainConfig, lr_at, DOMAIN_CRITERION, validation_metric
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q, ACTION_COLUMN
from kdlab.vocab import EVAL_ACTIONS, BOS
import copy, math

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)

# inline trainer variant: loss summed over positions (x T gradient scale)
def train_sum(model, dataset, oracle, objective, cfg):
    tokens = torch.tensor([ex.tokens for ex in dataset.train], dtype=torch.long)
    N, T = tokens.shape
    inp = torch.cat([torch.full((N,1), BOS), tokens], dim=1)
    teacher = torch.tensor(oracle.distribution_matrix(), dtype=model.dtype)
    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    decay, nodecay = [], []
    for p in model.parameters(): (decay if p.dim()>=2 else nodecay).append(p)
    opt = torch.optim.AdamW([{ 'params': decay, 'weight_decay': cfg.weight_decay},
                             {'params': nodecay, 'weight_decay': 0.0}],
                            lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    rng = torch.Generator().manual_seed(cfg.seed)
    best = (float('inf'), None); since = 0; step = 0
    for epoch in range(1, cfg.max_epochs+1):
        order = torch.from_numpy(np.random.Generator(np.random.PCG64((cfg.seed, epoch))).permutation(N))
        model.train()
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start+cfg.batch_size]
            lr = lr_at(step, total_steps, warmup_steps, cfg.learning_rate)
            for g in opt.param_groups: g['lr'] = lr
            lambdas = torch.tensor(position_lambdas(oracle, objective, step=step, total_steps=total_steps), dtype=model.dtype)
            loss = batch_objective(model(inp[idx], rng=rng), tokens[idx], teacher, lambdas, objective) * T
            opt.zero_grad(); loss.backward(); opt.step(); step += 1
        model.eval()
        m = validation_metric(model, dataset.val, oracle, 'teacher_forced_kl')
        if m < best[0]: best = (m, copy.deepcopy(model.state_dict())); since = 0
        else:
            since += 1
            if since >= cfg.early_stop_patience: break
    model.load_state_dict(best[1]); model.eval()
    return model, best[0], epoch

t0 = time.time()
m = StudentModel(ModelConfig(), seed=0)
m, best, ep = train_sum(m, ds, spec, ObjectiveConfig(mode='hard'), TrainConfig(seed=0))
print(f'sum-loss hard KD: {time.time()-t0:.0f}s best TFKL={best:.5f} epochs={ep}', flush=True)
open('/root/pkg/.pilot/hard_dialogue3.ckpt','wb').write(save_checkpoint(m))

eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])
for t in [2, 4, 6, 15, 30, 32, 33]:
    st = spec.schedule[t]
    q, _ = q_values(m, spec, examples, t, EVAL_ACTIONS, eng)
    ks, cand, garb = [], [], []
    for e in range(6):
        kap, base = kappa_from_q(spec, t, q[e])
        cc = [ACTION_COLUMN[c] for c in st.candidates]
        gc = [i for i in range(62) if i not in cc]
        ks.append(kap.sum()); cand.append(kap[cc].sum()); garb.append(kap[gc].sum())
    print(f't={t:2d} {st.kind[:4]} main={max(st.probs):.2f} ks={np.mean(ks):9.4f} cand={np.mean(cand):9.5f} garb={np.mean(garb):9.4f}', flush=True)
