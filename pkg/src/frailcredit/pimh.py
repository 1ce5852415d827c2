"""Particle independent Metropolis-Hastings over frailty paths.

Each iteration runs a fresh particle filter, draws one ancestral path by the
final weights and accepts it with probability ``min(1, p_new / p_current)``
where ``p`` are the filters' marginal-likelihood estimates.  Estimates are
held on the log scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .model import FirmPanel, FrailtyPath, Theta
from .smc import DegeneracyError, MonthStats, SmcConfig, SmcOutput, run_smc


@dataclass(frozen=True)
class PimhConfig:
    k_iterations: int = 100
    smc: SmcConfig = field(default_factory=SmcConfig)
    burn_in: int | None = None
    thin: int = 1

    def __post_init__(self):
        if self.k_iterations < 0:
            raise ValueError("k_iterations must be >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    @property
    def effective_burn_in(self) -> int:
        if self.burn_in is None:
            return self.k_iterations // 10
        return min(self.burn_in, self.k_iterations)

    @classmethod
    def for_samples(cls, n_samples: int, smc: SmcConfig, burn_in: int | None = None,
                    thin: int = 1) -> "PimhConfig":
        """Chain long enough to keep ``n_samples`` draws after burn-in and thinning."""
        kept = n_samples * thin
        if burn_in is None:
            burn_in = max(1, math.ceil(kept / 9))
        return cls(burn_in + kept - 1, smc, burn_in, thin)


@dataclass
class PimhChain:
    start: int
    samples: np.ndarray            # (K, T) stored paths
    log_marginals: np.ndarray      # (K,)
    anchors: np.ndarray            # (K,) frailty one month before ``start``
    acceptance_count: int
    cfg: PimhConfig
    state_log_marginals: np.ndarray = field(repr=False, default=None)  # every iteration, incl. burn-in

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def acceptance_rate(self) -> float:
        k = self.cfg.k_iterations
        return self.acceptance_count / k if k else float("nan")

    def path(self, k: int) -> FrailtyPath:
        return FrailtyPath(self.start, self.samples[k])


def accept(log_u: float, log_proposal: float, log_current: float) -> bool:
    """Metropolis test on log marginal-likelihood estimates only."""
    return log_u < log_proposal - log_current


def draw_path_from_smc(out: SmcOutput, rng) -> tuple[FrailtyPath, float]:
    """Pick one ancestral path with probability equal to its final weight."""
    return out.path(_draw_index(out, rng)), out.log_marginal


def _draw_index(out: SmcOutput, rng) -> int:
    cw = np.cumsum(out.weights)
    u = float(rng.random()) * cw[-1]
    return int(min(np.searchsorted(cw, u, side="right"), out.n_particles - 1))


def run_pimh(panel: FirmPanel, theta: Theta, cfg: PimhConfig) -> PimhChain:
    """Run the chain; iteration ``k`` uses filter seed ``derive_seed(seed, k)``."""
    base_seed = cfg.smc.seed
    streams = rngs.CounterStreams(base_seed)
    stats = MonthStats.from_panel(panel, theta.kappa, cfg.smc.dt)

    def one_filter(k: int) -> tuple[np.ndarray, float, float]:
        try:
            out = run_smc(panel, theta, cfg.smc.with_seed(rngs.derive_seed(base_seed, "pimh", k)), stats)
        except DegeneracyError as exc:
            raise DegeneracyError(f"PIMH iteration {k}: {exc}") from exc
        n = _draw_index(out, streams.generator(rngs.PATH_DRAW, k))
        return out.paths[n], out.log_marginal, out.h_anchor[n]

    burn = cfg.effective_burn_in
    path, log_p, anchor = one_filter(0)
    kept_paths, kept_lp, kept_anchor = [], [], []
    states = np.empty(cfg.k_iterations + 1)
    states[0] = log_p
    accepted = 0

    def keep(k):
        if k >= burn and (k - burn) % cfg.thin == 0:
            kept_paths.append(path)
            kept_lp.append(log_p)
            kept_anchor.append(anchor)

    keep(0)
    for k in range(1, cfg.k_iterations + 1):
        prop, lp_prop, anc_prop = one_filter(k)
        log_u = math.log(streams.uniforms(rngs.ACCEPT, k, 1)[0])
        if accept(log_u, lp_prop, log_p):
            path, log_p, anchor = prop, lp_prop, anc_prop
            accepted += 1
        states[k] = log_p
        keep(k)

    return PimhChain(panel.month_range[0], np.array(kept_paths), np.array(kept_lp),
                     np.array(kept_anchor), accepted, cfg, states)
