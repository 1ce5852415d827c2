"""Bootstrap particle filter for the frailty path.

The proposal is the OU transition itself, so the incremental weight of a
particle is the observation density of month ``t`` given its frailty value.
Per month that density only needs three panel sums (computed once per
``theta``), which makes a filter step O(N) whatever the number of firms:

    log g_t(h) = -S_t exp(xi h) + d_t xi h + B_t

with ``S_t = sum_i lambda0_it dt`` over firms alive in month ``t``, ``d_t`` the
number of defaults and ``B_t = sum log(lambda0_it dt)`` over the defaulters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .model import FirmPanel, FrailtyPath, ModelError, Theta, _check_exponent
from .ou import OuParams, transition_params

RESAMPLING_METHODS = ("multinomial", "systematic")


class DegeneracyError(RuntimeError):
    """Every particle received zero weight."""


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int = 512
    resampling: str = "multinomial"
    seed: int = 0
    h0_mode: str = "zero"
    dt: float = 1.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.resampling not in RESAMPLING_METHODS:
            raise ValueError(f"resampling must be one of {RESAMPLING_METHODS}")
        if self.h0_mode not in ("zero", "stationary"):
            raise ValueError("h0_mode must be 'zero' or 'stationary'")

    def with_seed(self, seed: int) -> "SmcConfig":
        return SmcConfig(self.n_particles, self.resampling, seed, self.h0_mode, self.dt)


@dataclass
class SmcOutput:
    start: int
    paths: np.ndarray          # (N, T) ancestral paths
    weights: np.ndarray        # final normalised weights
    log_marginal: float
    ess_by_step: np.ndarray
    h_anchor: np.ndarray       # frailty one month before ``start``, per final particle

    @property
    def n_particles(self) -> int:
        return self.paths.shape[0]

    def path(self, n: int) -> FrailtyPath:
        return FrailtyPath(self.start, self.paths[n])


@dataclass(frozen=True)
class MonthStats:
    """Per-month sufficient statistics of the panel for a fixed kappa."""

    S: np.ndarray
    d: np.ndarray
    B: np.ndarray

    @classmethod
    def from_panel(cls, panel: FirmPanel, kappa, dt: float = 1.0) -> "MonthStats":
        T = panel.n_months
        if panel.n_cells == 0:
            return cls(np.zeros(T), np.zeros(T), np.zeros(T))
        eta = panel.Z @ np.asarray(kappa, dtype=float)
        _check_exponent(eta)
        base = np.exp(eta) * dt
        t = panel.month_index
        dmask = panel.D == 1
        if np.any(base[dmask] == 0):
            raise ModelError("default with zero intensity")
        S = np.bincount(t, weights=base, minlength=T)
        d = np.bincount(t[dmask], minlength=T).astype(float)
        B = np.bincount(t[dmask], weights=np.log(base[dmask]), minlength=T)
        return cls(S, d, B)

    def log_obs(self, t: int, xi: float, h: np.ndarray) -> np.ndarray:
        xh = xi * h
        _check_exponent(xh, f" (frailty term, step {t})")
        return -self.S[t] * np.exp(xh) + self.d[t] * xh + self.B[t]


def resample(weights: np.ndarray, method: str, rng) -> np.ndarray:
    """Ancestor indices drawn from normalised ``weights``.

    ``rng`` needs a ``random(size)`` method; multinomial uses one uniform per
    particle, systematic a single uniform.
    """
    w = np.asarray(weights, dtype=float)
    n = w.size
    cw = np.cumsum(w)
    cw /= cw[-1]
    if method == "multinomial":
        u = rng.random(n)
    elif method == "systematic":
        u = (np.arange(n) + rng.random()) / n
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return np.minimum(np.searchsorted(cw, u, side="right"), n - 1)


def ess(weights: np.ndarray) -> float:
    return 1.0 / float(np.sum(np.square(weights)))


def run_smc(panel: FirmPanel, theta: Theta, cfg: SmcConfig, stats: MonthStats | None = None) -> SmcOutput:
    """Filter the frailty path over ``panel.month_range``.

    ``stats`` may be passed in to reuse the panel sums across repeated runs at
    the same ``theta`` (PIMH does this).
    """
    T = panel.n_months
    if T < 1:
        raise ValueError("empty panel window")
    N = cfg.n_particles
    if stats is None:
        stats = MonthStats.from_panel(panel, theta.kappa, cfg.dt)
    a, v = transition_params(OuParams(theta.eta, theta.sigma, cfg.dt))
    sd = math.sqrt(v)
    streams = rngs.CounterStreams(cfg.seed)

    if cfg.h0_mode == "stationary":
        if theta.eta == 0:
            raise ModelError("stationary initial law needs eta > 0")
        h_prev = math.sqrt(theta.sigma ** 2 / (2 * theta.eta)) * streams.normals(rngs.INIT, 0, N)
    else:
        h_prev = np.zeros(N)
    anchor = h_prev

    particles = np.empty((T, N))
    ancestors = np.empty((T, N), dtype=np.int64)
    ess_by_step = np.empty(T)
    log_marginal = 0.0
    log_n = math.log(N)
    W = None
    for t in range(T):
        if t == 0:
            A = np.arange(N)
        else:
            A = resample(W, cfg.resampling, streams.generator(rngs.RESAMPLE, t))
        h = a * h_prev[A] + sd * streams.normals(rngs.PROPAGATE, t, N)
        logw = stats.log_obs(t, theta.xi, h)
        top = np.max(logw)
        if not np.isfinite(top):
            raise DegeneracyError(f"particle degeneracy at step {t}")
        W = np.exp(logw - top)
        total = W.sum()
        log_marginal += top + math.log(total) - log_n
        W /= total
        particles[t] = h
        ancestors[t] = A
        ess_by_step[t] = ess(W)
        h_prev = h

    paths = np.empty((N, T))
    idx = np.arange(N)
    for t in range(T - 1, -1, -1):
        paths[:, t] = particles[t, idx]
        idx = ancestors[t, idx]
    return SmcOutput(panel.month_range[0], paths, W, float(log_marginal), ess_by_step, anchor[idx])
