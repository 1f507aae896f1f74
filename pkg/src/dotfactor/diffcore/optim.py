"""Adam optimizer over :class:`Tensor` parameters."""

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, **hyper):
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def _validate(lr, beta1, beta2, eps):
    if not (lr > 0 and 0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
        raise ValueError(f"invalid Adam hyperparameters lr={lr} betas=({beta1}, {beta2}) eps={eps}")


def adam_step(params, grads, states):
    """Bias-corrected Adam update applied in place to ``params``.

    ``grads`` entries may be None (treated as zero). All gradients are checked
    for shape and finiteness before any parameter is touched.
    """
    checked = []
    for p, g, st in zip(params, grads, states, strict=True):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or st.m.shape != p.shape or st.v.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} / state {st.m.shape} vs param {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("adam_step: non-finite gradient")
        checked.append(g)
    for p, g, st in zip(params, checked, states):
        _validate(st.lr, st.beta1, st.beta2, st.eps)
        st.t += 1
        bc1 = 1.0 - st.beta1 ** st.t
        bc2 = 1.0 - st.beta2 ** st.t
        kernels.adam_update(p.data, g, st.m, st.v, st.lr, st.beta1, st.beta2, st.eps, bc1, bc2)


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list = field(default=None, repr=False)

    def __post_init__(self):
        _validate(self.lr, self.beta1, self.beta2, self.eps)
        self.params = list(self.params)
        if self.states is None:
            self.states = [AdamState.for_param(p, lr=self.lr, beta1=self.beta1,
                                               beta2=self.beta2, eps=self.eps)
                           for p in self.params]

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.states)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
