import numpy as np, torch
from kdlab.oracle import build_oracle, generate_dataset
from kdlab.model import load_checkpoint
from kdlab.sensitivity import q_values, EngineConfig, kappa_from_q, ACTION_COLUMN
from kdlab.vocab import EVAL_ACTIONS

spec = build_oracle('dialogue')
ds = generate_dataset(spec, 0)
model, _ = load_checkpoint(open('/root/pkg/.pilot/hard_dialogue.ckpt','rb').read())
eng = EngineConfig(eps=1e-6)
examples = list(ds.eval[:6])

for t in [2, 4, 6, 15, 30, 32, 33]:
    st = spec.schedule[t]
    q, _ = q_values(model, spec, examples, t, EVAL_ACTIONS, eng)
    kappas = []
    cand_sum, garb_sum, main_k = [], [], []
    for e in range(6):
        kap, base = kappa_from_q(spec, t, q[e])
        kappas.append(kap.sum())
        cand_cols = [ACTION_COLUMN[c] for c in st.candidates]
        garb_cols = [i for i in range(62) if i not in cand_cols]
        cand_sum.append(kap[cand_cols].sum())
        garb_sum.append(kap[garb_cols].sum())
        main_k.append(kap[cand_cols[0]])
    print(f't={t:2d} {st.kind[:4]} main={max(st.probs):.2f} ks={np.mean(kappas):8.2f} '
          f'cand_part={np.mean(cand_sum):8.3f} garbage_part={np.mean(garb_sum):8.2f} kappa(main)={np.mean(main_k):7.3f}')

# per-step loss profile after an override at t=10 (deterministic) and t=4 (HR alt)
from kdlab.model import StudentModel
from kdlab.vocab import BOS
import torch
ex = examples[0]
def profile(t, a):
    toks = list(ex.tokens)
    toks[t] = a
    inp = torch.tensor([[BOS] + toks[:-1]])
    with torch.no_grad():
        lp = torch.log_softmax(model(inp).to(torch.float64), -1)[0]
    mat = spec.distribution_matrix()
    out = []
    for tau in range(t+1, spec.template_length):
        p = mat[tau]; nz = p > 0
        out.append(float((p[nz]*np.log(p[nz])).sum() - (torch.tensor(p[nz]) * lp[tau][torch.tensor(np.where(nz)[0])]).sum()))
    return out
print('\nloss profile after garbage@t=10:', [round(v,3) for v in profile(10, 60)][:12])
print('loss profile clean (no override):', [round(v,3) for v in profile(10, ex.tokens[10])][:12])
alt = spec.schedule[4].candidates[1]
print('loss profile after alt-cand@t=4 :', [round(v,3) for v in profile(4, alt)][:12])
print('loss profile after garbage@t=4  :', [round(v,3) for v in profile(4, 60)][:12])
