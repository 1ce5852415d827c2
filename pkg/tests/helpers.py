"""Shared fixtures for the test suite."""

from __future__ import annotations

import numpy as np

from frailcredit.model import N_COVARIATES, FirmPanel, FirmRecord, FrailtyPath, Theta


class ZeroNormals:
    """rng stand-in whose normal draws and integer picks are all zero."""

    def standard_normal(self, size=None):
        return np.zeros(size)

    def integers(self, low, high=None, size=None):
        return np.zeros(size, dtype=np.int64)

    def random(self, size=None):
        return np.full(size, 0.5) if size is not None else 0.5


def random_panel(rng, n_firms=4, n_months=6, first_month=0, p_default=0.3, scale=0.5,
                 full_span=False) -> FirmPanel:
    """Small random panel with shared macro columns and random entry/exit."""
    macro = rng.normal(size=(n_months, 2)) * scale
    recs = []
    for i in range(n_firms):
        if full_span:
            e, x = 0, n_months - 1
        else:
            e = int(rng.integers(0, n_months))
            x = int(rng.integers(e, n_months))
        n = x - e + 1
        z = np.empty((n, N_COVARIATES))
        z[:, 0] = 1.0
        z[:, 1:3] = macro[e:x + 1]
        z[:, 3:] = rng.normal(size=(n, N_COVARIATES - 3)) * scale
        d = np.zeros(n, dtype=int)
        if rng.random() < p_default:
            d[-1] = 1
        recs.append(FirmRecord(f"f{i}", first_month + e, first_month + x, z, d))
    return FirmPanel(recs, (first_month, first_month + n_months - 1))


def random_theta(rng, xi=None) -> Theta:
    kappa = rng.normal(size=N_COVARIATES) * 0.4
    kappa[0] = rng.uniform(-3.0, -1.0)
    return Theta(kappa, float(rng.uniform(0.0, 1.0) if xi is None else xi),
                 float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.3, 2.0)))


def random_path(rng, panel: FirmPanel) -> FrailtyPath:
    return FrailtyPath(panel.month_range[0], rng.normal(size=panel.n_months))


def cell_loop_loglik(panel: FirmPanel, h: np.ndarray, theta: Theta, dt: float = 1.0) -> float:
    """Brute-force complete-data log-likelihood, one cell at a time."""
    total = 0.0
    for rec in panel.firms:
        for j, m in enumerate(range(rec.entry_month, rec.exit_month + 1)):
            eta = sum(theta.kappa[c] * rec.rows[j, c] for c in range(N_COVARIATES))
            lam = np.exp(eta + theta.xi * h[m - panel.month_range[0]]) * dt
            total += -lam + (np.log(lam) if rec.defaults[j] == 1 else 0.0)
    return total


def month_log_obs_coefficients(panel: FirmPanel, theta: Theta, dt: float = 1.0):
    """Per-month (S, d, B) of log g_t(h) = -S e^{xi h} + d xi h + B, by a cell loop."""
    T = panel.n_months
    S, d, B = np.zeros(T), np.zeros(T), np.zeros(T)
    for rec in panel.firms:
        for j, m in enumerate(range(rec.entry_month, rec.exit_month + 1)):
            t = m - panel.month_range[0]
            base = float(np.exp(rec.rows[j] @ theta.kappa)) * dt
            S[t] += base
            if rec.defaults[j] == 1:
                d[t] += 1
                B[t] += np.log(base)
    return S, d, B


def gauss_hermite_marginal(panel: FirmPanel, theta: Theta, n_nodes: int = 64, h_anchor: float = 0.0):
    """Marginal likelihood by tensor Gauss-Hermite quadrature over the OU innovations.

    Returns (value, posterior mean of each month's frailty).
    """
    from numpy.polynomial.hermite_e import hermegauss

    from frailcredit.ou import OuParams, transition_params

    x, w = hermegauss(n_nodes)
    w = w / np.sqrt(2 * np.pi)
    a, v = transition_params(OuParams(theta.eta, theta.sigma))
    S, d, B = month_log_obs_coefficients(panel, theta)
    T = panel.n_months
    grids = np.meshgrid(*([x] * T), indexing="ij")
    weights = np.ones_like(grids[0])
    for g in np.meshgrid(*([w] * T), indexing="ij"):
        weights = weights * g
    h = np.full_like(grids[0], h_anchor)
    logg = np.zeros_like(grids[0])
    hs = []
    for t in range(T):
        h = a * h + np.sqrt(v) * grids[t]
        hs.append(h)
        xh = theta.xi * h
        logg += -S[t] * np.exp(xh) + d[t] * xh + B[t]
    f = weights * np.exp(logg)
    total = float(f.sum())
    return total, np.array([float((f * ht).sum()) / total for ht in hs])
