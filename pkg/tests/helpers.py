import numpy as np
import torch


def relative_grad_errors(model, loss_fn, h=1e-5):
    """Central finite differences against autograd, every parameter.

    The denominator is floored so that near-zero gradients are judged on
    absolute rather than relative error (standard gradcheck convention).
    """
    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    errs = []
    with torch.no_grad():
        for p in model.parameters():
            grad = p.grad.clone()
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = float(grad.view(-1)[i])
                errs.append(abs(ana - num) / max(1e-6, abs(ana) + abs(num)))
    return np.array(errs)
