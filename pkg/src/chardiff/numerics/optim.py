"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """AdamW over a name -> Tensor mapping.

    Decay is applied as ``p -= lr * wd * p`` before the bias-corrected
    adaptive update.  Parameters whose ``grad`` is None are treated as having
    a zero gradient.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = grads[name]
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            if st.weight_decay:
                p.data -= st.lr * st.weight_decay * p.data
            p.data -= (st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)).astype(p.dtype, copy=False)


def adamw_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Functional form: one AdamW update using the params' current grads."""
    opt = AdamW.__new__(AdamW)
    opt.params = params
    opt.state = state
    for name, p in params.items():
        state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros_like(p.data))
    opt.step()
