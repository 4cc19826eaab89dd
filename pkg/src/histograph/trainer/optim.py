"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import ParamStore


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, hyper: AdamHyper):
    """One update of a single array. Returns ``(new_param, new_state)``.

    ``state`` holds ``m``, ``v`` and the step count ``t``; an empty dict starts fresh.
    """
    t = state.get("t", 0) + 1
    m = state.get("m", np.zeros_like(param))
    v = state.get("v", np.zeros_like(param))
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    new = param - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    if hyper.weight_decay:
        new = new - hyper.lr * hyper.weight_decay * param
    return new.astype(param.dtype, copy=False), {"m": m, "v": v, "t": t}


class Adam:
    """Optimizer over every trainable tensor of a :class:`ParamStore`.

    Steps whose gradients contain NaN/Inf are skipped whole and counted in ``skipped``.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.hyper = AdamHyper(lr, betas[0], betas[1], eps, weight_decay)
        self.state: dict[str, dict] = {}
        self.skipped = 0

    def step(self) -> bool:
        live = [(k, t) for k, t in self.params.items() if t.requires_grad and t.grad is not None]
        if not all(np.all(np.isfinite(t.grad)) for _, t in live):
            self.skipped += 1
            return False
        for name, t in live:
            t.data, self.state[name] = adam_step(t.data, t.grad, self.state.get(name, {}), self.hyper)
        return True

    def zero_grad(self) -> None:
        self.params.zero_grad()
