from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, List

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, **kw) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **kw)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One bias-corrected Adam update in place; zeroes ``param.grad`` afterwards."""
    g = param.grad
    state.step_count += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.zero_grad()


class Adam:
    """Adam over a fixed list of parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Parameter] = list(params)
        self.states = [AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s)

    def set_lr(self, lr: float) -> None:
        for s in self.states:
            s.lr = lr


GRAD_FLOOR = 1e-6


def grad_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - central| / max(|central|, GRAD_FLOOR)``.

    Central differences of an O(1) loss carry roundoff near ``1e-16 / epsilon``,
    so coordinates whose true gradient is far below ``GRAD_FLOOR`` cannot be
    resolved to a relative tolerance; the floor keeps them from dominating.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    p = Parameter(x0)
    backward(f(p))
    analytic = p.grad.copy()
    numeric = np.zeros_like(x0)
    with no_grad():
        flat = x0.reshape(-1)
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += epsilon
            xm = flat.copy()
            xm[i] -= epsilon
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * epsilon)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), GRAD_FLOOR)))
