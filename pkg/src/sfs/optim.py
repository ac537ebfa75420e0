from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NumericalError, SegNetwork


@dataclass
class AdamState:
    """Adam moments plus a Keras-style time decay of the learning rate.

    The effective rate at step t (1-based) is ``lr / (1 + decay * (t - 1))``.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparams(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "decay": self.decay}


def sgd_step(net: SegNetwork, grads, state: AdamState, frozen=()):
    """One Adam update in place on ``net.params``; returns ``net``.

    Parameters named in ``frozen`` are left untouched and their moments are not advanced.
    """
    for name, g in grads.items():
        if name not in net.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != net.params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {net.params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    lr = state.lr / (1.0 + state.decay * (t - 1))
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name in frozen:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        net.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return net
