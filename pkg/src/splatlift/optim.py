"""Adam with bias correction over dicts of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def reindex(self, name: str, source: np.ndarray, fresh: np.ndarray) -> None:
        """Gather moments along axis 0 by ``source``; rows flagged ``fresh`` restart at zero."""
        if name not in self.m:
            return
        for moments in (self.m, self.v):
            arr = moments[name][source]
            arr[fresh] = 0.0
            moments[name] = arr


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> tuple[dict, AdamState]:
    """One in-place Adam update. ``lr`` is a float or a per-parameter dict."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name!r} {np.shape(params[name])}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= (rate / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state
