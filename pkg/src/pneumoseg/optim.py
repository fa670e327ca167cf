"""SGD with momentum/weight decay and the reduce-on-plateau schedule with its stop rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@torch.no_grad()
def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0):
    """In-place update: ``v = momentum * v + (g + wd * p)``; ``p -= lr * v``.

    ``velocity`` is a list of buffers aligned with ``params`` (``None`` entries
    are created as zeros). Returns the velocity list.
    """
    params, grads = list(params), list(grads)
    if velocity is None:
        velocity = [None] * len(params)
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {k}")
        d = g + weight_decay * p if weight_decay else g.clone()
        if velocity[k] is None:
            velocity[k] = torch.zeros_like(p)
        velocity[k].mul_(momentum).add_(d)
        p.sub_(lr * velocity[k])
    return velocity


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.1
    patience: int = 10
    stop_lr: float = 1e-7
    best: float = math.inf
    num_bad: int = 0
    reductions: list[int] = field(default_factory=list)
    epoch: int = 0


# lr is compared to stop_lr with this relative slack: 1e-3 * 0.1**4 rounds to 1.0000000000000002e-07
STOP_RTOL = 1e-9


def plateau_update(state: PlateauState, val_loss: float) -> tuple[float, bool]:
    """Record one epoch's validation loss; returns ``(lr, stop)``.

    A strictly lower loss is an improvement. After ``patience`` consecutive
    non-improving epochs the lr is multiplied by ``factor`` and the counter
    restarts.
    """
    if not math.isfinite(val_loss):
        raise FloatingPointError(f"non-finite validation loss {val_loss}")
    state.epoch += 1
    if val_loss < state.best:
        state.best = val_loss
        state.num_bad = 0
    else:
        state.num_bad += 1
        if state.num_bad >= state.patience:
            state.lr *= state.factor
            state.num_bad = 0
            state.reductions.append(state.epoch)
    stop = state.lr <= state.stop_lr * (1 + STOP_RTOL)
    return state.lr, stop
