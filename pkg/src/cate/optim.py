"""AdamW with decoupled weight decay and per-parameter decay groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor

REGULAR = "regular"
NO_DECAY = "none"


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)


class AdamW:
    """Loshchilov & Hutter AdamW.

    ``groups`` maps parameter name to ``"regular"`` (decayed) or ``"none"``.
    Parameters missing from ``groups`` are treated as regular. The decay
    multiplies the parameter by ``1 - lr * weight_decay`` before the Adam
    step, independent of the gradient.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, groups: dict[str, str] | None = None):
        self.params = params
        groups = dict(groups or {})
        for name in params:
            tag = groups.setdefault(name, REGULAR)
            if tag not in (REGULAR, NO_DECAY):
                raise ValueError(f"unknown decay group {tag!r} for {name!r}")
        self.state = AdamWState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                                groups=groups)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        st = self.state
        b1, b2 = st.betas
        for name, p in self.params.items():
            g = grads[name] if grads is not None else p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adamw: gradient {g.shape} for parameter {name!r} {p.data.shape}")
        st.step += 1
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = grads[name] if grads is not None else p.grad
            if g is None:
                continue
            if st.groups[name] == REGULAR and st.weight_decay:
                p.data = p.data * (1.0 - st.lr * st.weight_decay)
            m = st.m[name] = b1 * st.m[name] + (1.0 - b1) * g
            v = st.v[name] = b2 * st.v[name] + (1.0 - b2) * (g * g)
            p.data = p.data - st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
