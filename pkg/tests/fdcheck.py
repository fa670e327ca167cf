"""Central finite-difference gradient oracle used by several test modules."""

import numpy as np
import torch


def fd_rel_error(fn, tensors, eps=1e-6, max_coords=60, seed=0):
    """Largest relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar tensor and reads the leaf ``tensors``
    (double precision, requires_grad). Up to ``max_coords`` coordinates per
    tensor are perturbed; the error per tensor is ||g_a - g_n|| / max(||g_a||, ||g_n||).
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.view(-1)
        coords = np.arange(flat.numel())
        if len(coords) > max_coords:
            coords = rng.choice(coords, max_coords, replace=False)
        a, n = [], []
        for k in coords:
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + eps
                up = fn().item()
                flat[k] = orig - eps
                down = fn().item()
                flat[k] = orig
            a.append(ga.view(-1)[k].item())
            n.append((up - down) / (2 * eps))
        a, n = np.array(a), np.array(n)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale > 1e-10:
            worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
