"""Adam on a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    size: int
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        if self.m.shape != (self.size,) or self.v.shape != (self.size,):
            raise ValueError("moment vectors must have length `size`")

    def copy(self) -> "AdamState":
        return AdamState(
            self.size, self.alpha, self.beta1, self.beta2, self.eps,
            self.step_count, self.m.copy(), self.v.copy(),
        )


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, inplace: bool = False):
    """Apply one Adam update and return ``(state, params)``.

    By default the inputs are left untouched and fresh arrays returned.
    With ``inplace=True`` ``state`` and ``params`` are updated in place
    (and returned), which avoids allocations in long training loops.
    """
    if params.shape != (state.size,) or grad.shape != (state.size,):
        raise ValueError(
            f"params {params.shape} and grad {grad.shape} must both have length {state.size}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise ValueError(f"non-finite gradient entry at index {bad}")
    if not inplace:
        state = state.copy()
        params = params.copy()

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2

    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * (grad * grad)

    m_hat = m / (1.0 - b1**t)
    denom = np.sqrt(v / (1.0 - b2**t))
    denom += state.eps
    params -= state.alpha * m_hat / denom
    return state, params
