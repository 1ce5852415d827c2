"""Mean-reverting Ornstein-Uhlenbeck frailty on a monthly grid.

``dH = -eta H dt + sigma dW`` discretises exactly to the Gaussian AR(1)

    H' | H ~ N(a H, v),   a = exp(-eta dt),   v = sigma^2 (1 - a^2) / (2 eta)

with the Brownian limit ``v = sigma^2 dt`` at ``eta = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import FrailtyPath, ModelError


@dataclass(frozen=True)
class OuParams:
    eta: float
    sigma: float
    dt: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.eta, self.sigma, self.dt)):
            raise ModelError("OU parameters must be finite")
        if self.eta < 0 or self.sigma <= 0 or self.dt <= 0:
            raise ModelError(f"need eta >= 0, sigma > 0, dt > 0; got {self}")

    @property
    def stationary_variance(self) -> float:
        if self.eta == 0:
            return math.inf
        return self.sigma ** 2 / (2 * self.eta)


def transition_params(p: OuParams) -> tuple[float, float]:
    """Return the AR(1) coefficient ``a`` and innovation variance ``v``."""
    x = p.eta * p.dt
    a = math.exp(-x)
    if x == 0:
        return 1.0, p.sigma ** 2 * p.dt
    # -expm1(-2x) / (2 eta) keeps precision for small eta
    v = p.sigma ** 2 * -math.expm1(-2 * x) / (2 * p.eta)
    return a, v


def simulate_path(p: OuParams, t0: int, t1: int, h0: float, rng) -> FrailtyPath:
    """Simulate ``h[t0..t1]`` with ``h[t0] = h0``.

    ``rng`` only needs a ``standard_normal(size)`` method.
    """
    if t1 < t0:
        raise ModelError("simulate_path needs t0 <= t1")
    return FrailtyPath(t0, simulate_paths(p, t1 - t0, np.array([h0], dtype=float), rng)[0])


def simulate_paths(p: OuParams, steps: int, h0: np.ndarray, rng) -> np.ndarray:
    """Propagate each starting value ``steps`` months; returns (n, steps+1)."""
    a, v = transition_params(p)
    h0 = np.asarray(h0, dtype=float).ravel()
    out = np.empty((h0.size, steps + 1))
    out[:, 0] = h0
    if steps == 0:
        return out
    eps = np.asarray(rng.standard_normal((h0.size, steps)), dtype=float)
    sd = math.sqrt(v)
    for k in range(steps):
        out[:, k + 1] = a * out[:, k] + sd * eps[:, k]
    return out


def log_transition_density(h_next, h, p: OuParams):
    """Log density of ``h_next`` given ``h`` (broadcasts over arrays)."""
    a, v = transition_params(p)
    if v <= 0:
        raise ModelError("degenerate transition")
    r = np.asarray(h_next, dtype=float) - a * np.asarray(h, dtype=float)
    out = -0.5 * (math.log(2 * math.pi * v) + r * r / v)
    return float(out) if np.ndim(out) == 0 else out


def path_log_density(paths: np.ndarray, p: OuParams) -> np.ndarray:
    """Sum of transition log densities along each row of ``paths``.

    The first column is the conditioning value and is not scored.
    """
    paths = np.atleast_2d(paths)
    return log_transition_density(paths[:, 1:], paths[:, :-1], p).sum(axis=1)
