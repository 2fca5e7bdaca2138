"""AdamW and the linear learning-rate ramp."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..exceptions import ContractError

LR_START = 5e-3
LR_END = 2.5e-4
EPOCHS_DEFAULT = 550


def lr_schedule(epoch: int, total_epochs: int = EPOCHS_DEFAULT, lr_start: float = LR_START, lr_end: float = LR_END) -> float:
    """Linear ramp from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return lr_start
    frac = epoch / (total_epochs - 1)
    # this form is exact at both ends
    return (1.0 - frac) * lr_start + frac * lr_end


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> AdamWState:
    """One AdamW update, in place on ``params``.

    The decay is decoupled from the adaptive step: ``p <- p - lr * wd * p`` first,
    then the bias-corrected Adam move.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
