"""Monte Carlo EM for the frailty model and Hessian-based inference.

Each EM iteration samples frailty paths with PIMH at the current parameters,
then maximises the path-averaged complete-data log-posterior.  The
objective splits into two independent blocks:

* ``gamma = (kappa, xi)`` against the default/survival likelihood plus the
  prior (Newton trust region on the analytic gradient and Hessian);
* ``(eta, sigma)`` against the exact OU transition density of the paths
  (closed-form AR(1) regression).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import rng as rngs
from .model import (
    GAMMA_NAMES,
    N_COVARIATES,
    FirmPanel,
    FrailtyPath,
    ModelError,
    PathAveragedObjective,
    PriorSpec,
    Theta,
    UniformPrior,
)
from .pimh import PimhConfig, run_pimh
from .smc import SmcConfig, run_smc

log = logging.getLogger(__name__)

PARAM_NAMES = GAMMA_NAMES + ("eta", "sigma")
Z95 = 1.96
_DECREMENT_TOL = 1e-12


class EstimationError(RuntimeError):
    pass


class OptimizationError(EstimationError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True)
class OptimizerConfig:
    max_evals: int = 200
    grad_tol: float = 1e-6


@dataclass(frozen=True)
class EmConfig:
    n_paths_per_iter: int = 50
    smc: SmcConfig = field(default_factory=SmcConfig)
    burn_in: int | None = None
    thin: int = 1
    max_iters: int = 100
    tol: float = 1e-3
    patience: int = 3
    fix_sigma: float | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    xi0: float = 0.05
    eta0: float = 0.01
    sigma0: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_paths_per_iter < 1 or self.max_iters < 1 or self.patience < 1:
            raise ValueError("EM counts must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.fix_sigma is not None and not self.fix_sigma > 0:
            raise ValueError("fix_sigma must be > 0")


@dataclass(frozen=True)
class Inference:
    estimate: np.ndarray
    se: np.ndarray
    t_stats: np.ndarray
    ci95_lower: np.ndarray
    ci95_upper: np.ndarray


@dataclass
class ThetaEstimate:
    theta: Theta
    se: np.ndarray
    t_stats: np.ndarray
    ci95_lower: np.ndarray
    ci95_upper: np.ndarray
    loglik: float
    iterations: int
    trace: list[float]
    n_obs: int = 0
    log_marginal: float = float("nan")
    prior_kind: str = "uniform"
    end_month: int = 0
    terminal_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = False

    @property
    def estimate(self) -> np.ndarray:
        return self.theta.as_vector()

    def rows(self):
        """(name, coefficient, se, t, lower, upper) per parameter."""
        est = self.estimate
        for k, name in enumerate(PARAM_NAMES):
            yield (name, est[k], self.se[k], self.t_stats[k], self.ci95_lower[k], self.ci95_upper[k])


# --------------------------------------------------------------------------
# inference


def inference_from_se(estimate, se) -> Inference:
    est = np.asarray(estimate, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = est / se
    return Inference(est, se, t, est - Z95 * se, est + Z95 * se)


def fd_hessian(f: Callable, x, rel_step: float = 1e-4, grad: Callable | None = None) -> np.ndarray:
    """Central-difference Hessian, symmetrised.

    Steps are ``rel_step * max(|x_i|, 1)``.  With ``grad`` the gradient is
    differenced once; otherwise ``f`` is differenced twice.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    h = rel_step * np.maximum(np.abs(x), 1.0)
    H = np.empty((n, n))
    if grad is not None:
        for j in range(n):
            e = np.zeros(n)
            e[j] = h[j]
            H[:, j] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2 * h[j])
    else:
        f0 = f(x)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = h[i]
            H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
            for j in range(i):
                ej = np.zeros(n)
                ej[j] = h[j]
                H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
                H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def asymptotic_inference(objective: Callable, theta_hat, grad: Callable | None = None,
                         rel_step: float = 1e-4) -> Inference:
    """Standard errors from the inverse negative Hessian of ``objective`` at its maximum."""
    x = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    H = fd_hessian(objective, x, rel_step, grad)
    info = -H
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise EstimationError("not at a maximum: Hessian is not negative definite") from None
    Linv = np.linalg.inv(L)
    cov = Linv.T @ Linv
    return inference_from_se(x, np.sqrt(np.diag(cov)))


# --------------------------------------------------------------------------
# gamma block


def _maximize(value, grad, hess, x0, opt: OptimizerConfig, what: str) -> np.ndarray:
    res = optimize.minimize(
        lambda x: -value(x), np.asarray(x0, dtype=float),
        jac=lambda x: -grad(x), hess=lambda x: -hess(x),
        method="trust-exact", options={"gtol": opt.grad_tol, "maxiter": opt.max_evals},
    )
    x = res.x
    if not np.all(np.isfinite(x)):
        raise OptimizationError(f"{what}: optimizer diverged ({res.message})", last=x)
    # Newton polish; with large objectives the gradient norm floor is set by
    # rounding, so also accept a negligible Newton decrement g' (-H)^-1 g
    for _ in range(5):
        g = grad(x)
        if float(np.linalg.norm(g)) <= opt.grad_tol:
            return x
        try:
            step = np.linalg.solve(-hess(x), g)
        except np.linalg.LinAlgError:
            break
        decrement = float(g @ step)
        if 0 <= decrement <= _DECREMENT_TOL:
            return x
        if decrement < 0:
            break
        if value(x + step) >= value(x):
            x = x + step
        else:
            break
    g = grad(x)
    gnorm = float(np.linalg.norm(g))
    raise OptimizationError(f"{what}: optimizer stopped with gradient norm {gnorm:.3g} "
                            f"after {res.nit} iterations ({res.message})", last=x)


class _HazardObjective:
    """Frailty-free exponential hazard log-likelihood for a generic design."""

    def __init__(self, X, D, dt=1.0):
        self.X = np.asarray(X, dtype=float)
        self.d = np.asarray(D) == 1
        self.dt = dt

    def _m(self, k):
        e = self.X @ k
        if np.any(e > 709.0):
            raise ModelError(f"intensity overflow: exponent {float(e.max()):.6g}")
        return e, np.exp(e) * self.dt

    def value(self, k):
        e, m = self._m(k)
        return float(-m.sum() + (e[self.d] + math.log(self.dt)).sum())

    def grad(self, k):
        return (self.d - self._m(k)[1]) @ self.X

    def hess(self, k):
        m = self._m(k)[1]
        return -(self.X * m[:, None]).T @ self.X


def fit_exponential_hazard(X, D, dt: float = 1.0, opt: OptimizerConfig | None = None) -> np.ndarray:
    """MLE of ``k`` in ``lambda = exp(X k)`` without frailty, started at zero."""
    opt = opt or OptimizerConfig()
    D = np.asarray(D)
    if not np.any(D == 1):
        raise EstimationError("no defaults: kappa unbounded")
    if not np.any(D == 0):
        raise EstimationError("no survival cells")
    obj = _HazardObjective(X, D, dt)
    return _maximize(obj.value, obj.grad, obj.hess, np.zeros(np.shape(X)[1]), opt, "fit_no_frailty")


def fit_no_frailty(panel: FirmPanel, opt: OptimizerConfig | None = None, dt: float = 1.0) -> np.ndarray:
    return fit_exponential_hazard(panel.Z, panel.D, dt, opt)


def mstep_gamma(paths: Sequence[FrailtyPath] | np.ndarray, panel: FirmPanel, prior: PriorSpec,
                start, opt: OptimizerConfig | None = None, dt: float = 1.0) -> np.ndarray:
    """Maximise the path-averaged log-posterior over ``gamma = (kappa, xi)``."""
    opt = opt or OptimizerConfig()
    obj = PathAveragedObjective.from_panel(panel, paths, prior, dt) if panel.n_cells else \
        PathAveragedObjective(panel.Z, panel.D, panel.month_index, np.zeros((1, 0)), prior, dt)
    start = np.asarray(start, dtype=float)
    g = _maximize(obj.value, obj.gradient, obj.hessian, start, opt, "M-step (kappa, xi)")
    if obj.value(g) < obj.value(start):
        raise OptimizationError("M-step (kappa, xi): objective decreased", last=g)
    return g


# --------------------------------------------------------------------------
# OU block


def _ou_av(eta: float, sigma: float, dt: float) -> tuple[float, float]:
    # valid for any real eta, which finite differences may probe
    x = eta * dt
    if abs(x) < 1e-12:
        return math.exp(-x), sigma ** 2 * dt
    return math.exp(-x), sigma ** 2 * -math.expm1(-2 * x) / (2 * eta)


def ou_loglik(paths: np.ndarray, eta: float, sigma: float, dt: float = 1.0) -> float:
    """Mean over rows of the exact OU log density of consecutive columns."""
    a, v = _ou_av(eta, sigma, dt)
    if not v > 0:
        return -math.inf
    r = paths[:, 1:] - a * paths[:, :-1]
    n = r.shape[1]
    return float(-0.5 * (n * math.log(2 * math.pi * v) + (r * r).sum(axis=1) / v).mean())


def mstep_ou(paths, dt: float = 1.0, fix_sigma: float | None = None,
             clamp: bool = False) -> tuple[float, float]:
    """Exact-discretisation MLE of (eta, sigma) from sampled paths.

    The rows of ``paths`` are pooled into one zero-intercept AR(1)
    regression ``h[t+1] = a h[t] + e``.  With ``clamp`` a fitted ``a > 1`` is
    moved to the boundary ``a = 1`` (``eta = 0``), which is the constrained
    maximum since the likelihood is concave in ``a``.
    """
    P = np.atleast_2d(np.asarray(paths, dtype=float))
    if P.shape[1] < 3:
        raise EstimationError("OU M-step needs paths of length >= 3")
    x, y = P[:, :-1], P[:, 1:]
    sxx = float((x * x).sum())
    if sxx == 0.0:
        raise EstimationError("OU regression out of range: all-zero regressor")
    a = float((x * y).sum()) / sxx
    if clamp and a > 1.0:
        a = 1.0
    if not 0.0 < a <= 1.0:
        raise EstimationError(f"OU regression out of range: a = {a:.6g}")
    eta = -math.log(a) / dt
    if fix_sigma is not None:
        res = optimize.minimize_scalar(lambda e: -ou_loglik(P, e, fix_sigma, dt),
                                       bounds=(0.0, max(50.0 / dt, 10 * eta)), method="bounded",
                                       options={"xatol": 1e-10})
        return float(res.x), float(fix_sigma)
    v = float(((y - a * x) ** 2).mean())
    if eta == 0.0:
        return 0.0, math.sqrt(v / dt)
    return eta, math.sqrt(2 * eta * v / -math.expm1(-2 * eta * dt))


# --------------------------------------------------------------------------
# EM driver


class CompleteDataObjective:
    """Path-averaged log-posterior plus OU path density as a function of theta."""

    def __init__(self, panel: FirmPanel, paths: np.ndarray, anchors: np.ndarray, prior: PriorSpec,
                 dt: float = 1.0):
        self.gamma_part = (PathAveragedObjective.from_panel(panel, paths, prior, dt)
                           if panel.n_cells else None)
        self.full_paths = np.column_stack([anchors, paths])
        self.dt = dt

    def __call__(self, theta_vec) -> float:
        v = np.asarray(theta_vec, dtype=float)
        g = self.gamma_part.value(v[:N_COVARIATES + 1]) if self.gamma_part else 0.0
        return g + ou_loglik(self.full_paths, v[9], v[10], self.dt)


def em_estimate(panel: FirmPanel, prior: PriorSpec | None = None, cfg: EmConfig | None = None,
                callback: Callable | None = None) -> ThetaEstimate:
    """Particle MCMC EM.  Starts from the frailty-free fit with
    ``(xi, eta, sigma) = (cfg.xi0, cfg.eta0, cfg.sigma0)``."""
    prior = prior or UniformPrior()
    cfg = cfg or EmConfig()
    dt = cfg.smc.dt
    kappa0 = fit_no_frailty(panel, cfg.optimizer, dt)
    sigma0 = cfg.fix_sigma if cfg.fix_sigma is not None else cfg.sigma0
    theta = Theta(kappa0, cfg.xi0, cfg.eta0, sigma0)
    trace: list[float] = []
    calm = 0
    converged = False
    chain = paths = anchors = None
    i = 0
    for i in range(1, cfg.max_iters + 1):
        try:
            smc_cfg = cfg.smc.with_seed(rngs.derive_seed(cfg.seed, "em", i))
            chain = run_pimh(panel, theta, PimhConfig.for_samples(cfg.n_paths_per_iter, smc_cfg,
                                                                  cfg.burn_in, cfg.thin))
            paths, anchors = chain.samples, chain.anchors
            gamma = mstep_gamma(paths, panel, prior, theta.gamma, cfg.optimizer, dt)
            if gamma[-1] < 0:
                # (xi, h) -> (-xi, -h) leaves the model unchanged; keep xi >= 0
                gamma[-1] = -gamma[-1]
                paths, anchors = -paths, -anchors
            full = np.column_stack([anchors, paths])
            eta, sigma = mstep_ou(full, dt, cfg.fix_sigma, clamp=True)
            theta = Theta(gamma[:-1], gamma[-1], eta, sigma)
        except Exception as exc:
            raise EstimationError(f"EM iteration {i}: {exc}") from exc
        q = CompleteDataObjective(panel, paths, anchors, prior, dt)(theta.as_vector())
        log.info("EM iteration %d: objective %.6f, xi %.4f, eta %.4f, sigma %.4f, acceptance %.2f",
                 i, q, theta.xi, theta.eta, theta.sigma, chain.acceptance_rate)
        if trace and abs(q - trace[-1]) < cfg.tol:
            calm += 1
        else:
            calm = 0
        trace.append(q)
        if callback is not None:
            callback(i, theta, q)
        if calm >= cfg.patience:
            converged = True
            break

    objective = CompleteDataObjective(panel, paths, anchors, prior, dt)
    est = theta.as_vector()
    free = np.arange(11) if cfg.fix_sigma is None else np.arange(10)

    def sub(x):
        v = est.copy()
        v[free] = x
        return objective(v)

    inf = asymptotic_inference(sub, est[free])
    se = np.full(11, np.nan)
    se[free] = inf.se
    full_inf = inference_from_se(est, se)

    try:
        lm = run_smc(panel, theta, cfg.smc.with_seed(rngs.derive_seed(cfg.seed, "final"))).log_marginal
    except Exception:  # diagnostic only
        lm = float("nan")
    return ThetaEstimate(
        theta=theta, se=se, t_stats=full_inf.t_stats, ci95_lower=full_inf.ci95_lower,
        ci95_upper=full_inf.ci95_upper, loglik=trace[-1], iterations=i, trace=trace,
        n_obs=panel.n_cells, log_marginal=lm, prior_kind=getattr(prior, "kind", "uniform"),
        end_month=panel.month_range[1], terminal_samples=np.array(paths[:, -1]), converged=converged,
    )
