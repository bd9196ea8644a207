"""Adadelta optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pvhnet.errors import ShapeMismatch


@dataclass
class AdadeltaState:
    """Decay ``rho``, conditioner ``epsilon`` and running averages per parameter name.

    ``accumulators[name]`` is the pair ``(E[g^2], E[dx^2])``.
    """

    rho: float = 0.95
    epsilon: float = 1e-6
    accumulators: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def slots(self, name: str, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.accumulators:
            self.accumulators[name] = (np.zeros_like(like), np.zeros_like(like))
        return self.accumulators[name]


def adadelta_step(params, grads: dict[str, np.ndarray], state: AdadeltaState) -> None:
    """In-place Adadelta update of every parameter that has an entry in ``grads``.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    dx     <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
    """
    rho, eps = state.rho, state.epsilon
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {p.name} has shape {g.shape}, expected {p.shape}")
        eg2, edx2 = state.slots(p.name, p.data)
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        p.data += dx.astype(p.dtype, copy=False)
        p.state["adadelta_sq_grad"] = eg2
        p.state["adadelta_sq_delta"] = edx2
