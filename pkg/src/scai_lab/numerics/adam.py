"""Adam with bias correction over named numpy parameters."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params, grads, state):
    """Update ``params`` (name -> Parameter) in place from ``grads`` (name -> array).

    Parameters without a gradient entry keep their value but their moments
    still decay, matching a zero gradient.
    """
    missing = set(grads) - set(params)
    if missing:
        raise KeyError(f"gradients for undeclared parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name}: {g.shape} vs {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        # fresh array: snapshots taken before the step stay valid
        p.data = (p.data - upd).astype(p.data.dtype)
    return params, state
