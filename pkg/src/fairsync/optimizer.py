"""First-order updates of the dual vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractError


def _check_gradient(mu: np.ndarray, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != mu.shape:
        raise ContractError(f"gradient shape {g.shape} does not match mu {mu.shape}")
    if not np.all(np.isfinite(g)):
        raise ContractError("gradient has non-finite entries")
    return g


@dataclass
class AdamState:
    """Adam moments for a vector of dual variables.

    Minimises: the update moves ``mu`` against the gradient.
    """

    size: int
    eta: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    t: int = field(init=False, default=0)

    def __post_init__(self):
        if not self.eta > 0:
            raise ContractError("eta must be positive")
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def step(self, mu, g) -> np.ndarray:
        return adam_step(self, mu, g)


def adam_step(state: AdamState, mu, g) -> np.ndarray:
    """Advance ``state`` by one update and return the new dual vector."""
    mu = np.asarray(mu, dtype=np.float64)
    g = _check_gradient(mu, g)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return mu - state.eta * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class SGDState:
    size: int
    eta: float = 1e-2
    t: int = 0

    def step(self, mu, g) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64)
        g = _check_gradient(mu, g)
        self.t += 1
        return mu - self.eta * g


def make_optimizer(name: str, size: int, eta: float):
    if name == "adam":
        return AdamState(size, eta=eta)
    if name == "sgd":
        return SGDState(size, eta=eta)
    raise ContractError(f"unknown optimizer {name!r}")
