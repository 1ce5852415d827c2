"""Doubly stochastic default intensities with a latent frailty factor.

The intensity of firm ``i`` in month ``t`` is

    lambda_it = exp(kappa . z_it + xi * h_t)

with ``z_it = (1, treasury, sp500, d2d, firm_size, roa, leverage,
firm_return)`` and ``h`` the frailty path.  Conditional on ``h`` a month
contributes ``log(lambda dt) - lambda dt`` if the firm defaults in it and
``-lambda dt`` otherwise.

Everything here is a pure function of immutable inputs.  Panels are stored
as flat cell arrays (one row per firm-month) so that likelihood sums and
their path averages are vectorised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky

COVARIATES = (
    "constant",
    "treasury",
    "sp500",
    "d2d",
    "firm_size",
    "roa",
    "leverage",
    "firm_return",
)
N_COVARIATES = len(COVARIATES)
MACRO_COLUMNS = (1, 2)
FIRM_COLUMNS = (3, 4, 5, 6, 7)
GAMMA_NAMES = COVARIATES + ("xi",)

# exp() overflows above this
_MAX_EXPONENT = math.log(np.finfo(float).max)

# months are counted from January of BASE_YEAR
BASE_YEAR = 1980


def month_to_year(month: int) -> int:
    return BASE_YEAR + month // 12


def year_to_month(year: int) -> int:
    return (year - BASE_YEAR) * 12


class ModelError(ValueError):
    """Invalid model input or a numerically impossible likelihood cell."""


class PanelError(ValueError):
    """A panel violates the record invariants."""


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CovariateRow:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.shape != (N_COVARIATES,):
            raise ModelError(f"covariate row must have {N_COVARIATES} entries, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ModelError("covariate row has non-finite entries")
        if z[0] != 1.0:
            raise ModelError("covariate row must start with the constant 1")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class FirmRecord:
    firm_id: str
    entry_month: int
    exit_month: int
    rows: np.ndarray
    defaults: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        d = np.asarray(self.defaults, dtype=np.int8).ravel()
        n = self.exit_month - self.entry_month + 1
        if n < 1:
            raise PanelError(f"firm {self.firm_id}: exit month {self.exit_month} before entry {self.entry_month}")
        if rows.shape != (n, N_COVARIATES) or d.shape != (n,):
            raise PanelError(f"firm {self.firm_id}: expected {n} contiguous monthly rows")
        if not np.all(np.isfinite(rows)):
            bad = int(np.argwhere(~np.isfinite(rows))[0, 0])
            raise PanelError(f"firm {self.firm_id}, month {self.entry_month + bad}: missing or non-finite covariate")
        if np.any(rows[:, 0] != 1.0):
            raise PanelError(f"firm {self.firm_id}: constant column must equal 1")
        if np.any((d != 0) & (d != 1)):
            raise PanelError(f"firm {self.firm_id}: default indicator must be 0 or 1")
        hits = np.flatnonzero(d)
        if hits.size > 1 or (hits.size == 1 and hits[0] != n - 1):
            m = self.entry_month + int(hits[0])
            raise PanelError(f"firm {self.firm_id}, month {m}: default must occur only at the exit month")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "defaults", d)

    @property
    def months(self) -> np.ndarray:
        return np.arange(self.entry_month, self.exit_month + 1)


class FirmPanel:
    """Firm-month panel stored as flat, firm-major cell arrays.

    Attributes
    ----------
    firm_ids : tuple of str
    cell_firm : (n_cells,) int array, index into ``firm_ids``
    month : (n_cells,) int array
    Z : (n_cells, 8) covariates
    D : (n_cells,) default indicators
    month_range : (first, last) month over all firms
    macro : (n_months, 2) shared treasury / sp500 values, NaN where no firm is alive
    """

    def __init__(self, records: Iterable[FirmRecord], month_range: tuple[int, int] | None = None):
        records = list(records)
        ids = [r.firm_id for r in records]
        if len(set(ids)) != len(ids):
            raise PanelError("duplicate firm ids")
        self.firm_ids = tuple(ids)
        if records:
            self.month = np.concatenate([r.months for r in records]).astype(np.int64)
            self.Z = np.concatenate([r.rows for r in records], axis=0)
            self.D = np.concatenate([r.defaults for r in records]).astype(np.int8)
            self.cell_firm = np.repeat(np.arange(len(records)),
                                       [r.exit_month - r.entry_month + 1 for r in records])
            lo, hi = int(self.month.min()), int(self.month.max())
        else:
            self.month = np.zeros(0, dtype=np.int64)
            self.Z = np.zeros((0, N_COVARIATES))
            self.D = np.zeros(0, dtype=np.int8)
            self.cell_firm = np.zeros(0, dtype=np.int64)
            lo, hi = (0, -1)
        if month_range is not None:
            if records and (month_range[0] > lo or month_range[1] < hi):
                raise PanelError(f"firm months [{lo}, {hi}] fall outside month range {tuple(month_range)}")
            lo, hi = int(month_range[0]), int(month_range[1])
        self.month_range = (lo, hi)
        self._entry = np.array([r.entry_month for r in records], dtype=np.int64)
        self._exit = np.array([r.exit_month for r in records], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(self._exit - self._entry + 1)]).astype(np.int64)
        for a in (self.month, self.Z, self.D, self.cell_firm):
            a.setflags(write=False)
        self.macro = self._check_macro()

    def _check_macro(self) -> np.ndarray:
        macro = np.full((self.n_months, 2), np.nan)
        if self.n_cells == 0:
            return macro
        t = self.month_index
        cols = self.Z[:, MACRO_COLUMNS]
        order = np.lexsort((self.cell_firm, t))
        first = np.ones(self.n_cells, dtype=bool)
        first[1:] = t[order][1:] != t[order][:-1]
        macro[t[order][first]] = cols[order][first]
        ref = macro[t]
        bad = ~np.isclose(cols, ref, rtol=1e-12, atol=0.0).all(axis=1)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise PanelError(f"firm {self.firm_ids[self.cell_firm[k]]}, month {int(self.month[k])}: "
                             "macro covariates disagree with other firms in the same month")
        macro.setflags(write=False)
        return macro

    # -- sizes and views ---------------------------------------------------

    @property
    def n_firms(self) -> int:
        return len(self.firm_ids)

    @property
    def n_cells(self) -> int:
        return int(self.month.shape[0])

    @property
    def n_months(self) -> int:
        return self.month_range[1] - self.month_range[0] + 1

    @property
    def n_defaults(self) -> int:
        return int(self.D.sum())

    @property
    def month_index(self) -> np.ndarray:
        """Cell month relative to the start of ``month_range``."""
        return self.month - self.month_range[0]

    @property
    def entry_months(self) -> np.ndarray:
        return self._entry

    @property
    def exit_months(self) -> np.ndarray:
        return self._exit

    def firm_slice(self, k: int) -> slice:
        return slice(int(self._offsets[k]), int(self._offsets[k + 1]))

    def record(self, k: int) -> FirmRecord:
        s = self.firm_slice(k)
        return FirmRecord(self.firm_ids[k], int(self._entry[k]), int(self._exit[k]),
                          np.array(self.Z[s]), np.array(self.D[s]))

    @property
    def firms(self) -> list[FirmRecord]:
        return [self.record(k) for k in range(self.n_firms)]

    def defaulted(self) -> np.ndarray:
        """Boolean per firm: the record ends in default."""
        out = np.zeros(self.n_firms, dtype=bool)
        out[self.cell_firm[self.D == 1]] = True
        return out

    def subset(self, firm_ids: Sequence[str], keep_range: bool = True) -> "FirmPanel":
        pos = {f: k for k, f in enumerate(self.firm_ids)}
        recs = [self.record(pos[f]) for f in firm_ids]
        return FirmPanel(recs, self.month_range if keep_range else None)

    def window(self, first: int, last: int) -> "FirmPanel":
        """Restrict to months ``first..last``; firms are truncated (censored)."""
        recs = []
        for k in range(self.n_firms):
            lo, hi = max(first, int(self._entry[k])), min(last, int(self._exit[k]))
            if lo > hi:
                continue
            s = self.firm_slice(k)
            a = s.start + lo - int(self._entry[k])
            b = a + hi - lo + 1
            recs.append(FirmRecord(self.firm_ids[k], lo, hi, np.array(self.Z[a:b]), np.array(self.D[a:b])))
        return FirmPanel(recs, (first, last))

    def __eq__(self, other):
        if not isinstance(other, FirmPanel):
            return NotImplemented
        return (self.firm_ids == other.firm_ids and self.month_range == other.month_range
                and np.array_equal(self.month, other.month) and np.array_equal(self.Z, other.Z)
                and np.array_equal(self.D, other.D))

    def __repr__(self):
        return (f"FirmPanel(firms={self.n_firms}, cells={self.n_cells}, "
                f"defaults={self.n_defaults}, months={self.month_range})")


@dataclass(frozen=True, eq=False)
class Theta:
    """Intensity parameters (kappa, xi) and frailty dynamics (eta, sigma)."""

    kappa: np.ndarray
    xi: float
    eta: float
    sigma: float

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float).copy()
        if kappa.shape != (N_COVARIATES,):
            raise ModelError(f"kappa must have {N_COVARIATES} entries")
        kappa.setflags(write=False)
        object.__setattr__(self, "kappa", kappa)
        vals = (self.xi, self.eta, self.sigma)
        if not (np.all(np.isfinite(kappa)) and all(math.isfinite(v) for v in vals)):
            raise ModelError("theta has non-finite entries")
        if self.xi < 0 or self.eta < 0 or self.sigma <= 0:
            raise ModelError(f"need xi >= 0, eta >= 0, sigma > 0; got xi={self.xi}, eta={self.eta}, sigma={self.sigma}")
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def gamma(self) -> np.ndarray:
        return np.append(self.kappa, self.xi)

    def replace(self, **kw) -> "Theta":
        d = dict(kappa=self.kappa, xi=self.xi, eta=self.eta, sigma=self.sigma)
        d.update(kw)
        return Theta(**d)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.kappa, [self.xi, self.eta, self.sigma]])

    @classmethod
    def from_vector(cls, v) -> "Theta":
        v = np.asarray(v, dtype=float)
        return cls(v[:N_COVARIATES], v[8], v[9], v[10])

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return np.array_equal(self.as_vector(), other.as_vector())


@dataclass(frozen=True)
class FrailtyPath:
    """Frailty values ``h`` on the consecutive months ``start .. start+len(h)-1``."""

    start: int
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).ravel().copy()
        if not np.all(np.isfinite(h)):
            raise ModelError("frailty path has non-finite entries")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def end(self) -> int:
        return self.start + self.h.shape[0] - 1

    def covering(self, first: int, last: int) -> np.ndarray:
        if first < self.start or last > self.end:
            raise ModelError(f"frailty path [{self.start}, {self.end}] does not cover months [{first}, {last}]")
        return self.h[first - self.start:last - self.start + 1]


# --------------------------------------------------------------------------
# priors


class UniformPrior:
    """Flat prior on gamma = (kappa, xi); contributes nothing."""

    kind = "uniform"

    def logpdf(self, gamma) -> float:
        return 0.0

    def grad(self, gamma) -> np.ndarray:
        return np.zeros(np.shape(gamma))

    def hess(self, gamma) -> np.ndarray:
        n = np.shape(gamma)[0]
        return np.zeros((n, n))

    def __eq__(self, other):
        return isinstance(other, UniformPrior)

    def __repr__(self):
        return "UniformPrior()"


class GaussianPrior:
    """Multivariate normal prior N(mu, sigma) on gamma = (kappa, xi)."""

    kind = "gaussian"

    def __init__(self, mu, sigma):
        mu = np.asarray(mu, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise ModelError(f"prior covariance must be {mu.size}x{mu.size}")
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-14):
            raise ModelError("prior covariance not symmetric")
        try:
            self._chol = cholesky(sigma, lower=True)
        except np.linalg.LinAlgError:
            raise ModelError("prior covariance not positive definite") from None
        self.mu = mu
        self.sigma = sigma
        self.precision = cho_solve((self._chol, True), np.eye(mu.size))
        self.log_norm = -0.5 * mu.size * math.log(2 * math.pi) - float(np.log(np.diag(self._chol)).sum())

    def logpdf(self, gamma) -> float:
        r = np.asarray(gamma, dtype=float) - self.mu
        w = np.linalg.solve(self._chol, r)
        return self.log_norm - 0.5 * float(w @ w)

    def grad(self, gamma) -> np.ndarray:
        return -cho_solve((self._chol, True), np.asarray(gamma, dtype=float) - self.mu)

    def hess(self, gamma) -> np.ndarray:
        return -self.precision

    def __eq__(self, other):
        return (isinstance(other, GaussianPrior) and np.array_equal(self.mu, other.mu)
                and np.array_equal(self.sigma, other.sigma))

    def __repr__(self):
        return f"GaussianPrior(mu={self.mu.tolist()})"


PriorSpec = UniformPrior | GaussianPrior


# --------------------------------------------------------------------------
# single-cell operations


def _check_exponent(x: float | np.ndarray, where: str = ""):
    x = np.asarray(x)
    if np.any(x > _MAX_EXPONENT):
        worst = float(np.max(x))
        raise ModelError(f"intensity overflow: exponent {worst:.6g}{where}")


def intensity(z, h: float, theta: Theta) -> float:
    """Default intensity ``exp(kappa . z + xi * h)``."""
    z = z.z if isinstance(z, CovariateRow) else np.asarray(z, dtype=float)
    x = float(theta.kappa @ z) + theta.xi * float(h)
    _check_exponent(x)
    return math.exp(x)


def period_loglik(lam: float, dt: float, d: int) -> float:
    """Log-probability of one firm-month: default (``d=1``) or survival."""
    m = lam * dt
    if m < 0:
        raise ModelError("lambda * dt must be non-negative")
    if d:
        if m == 0:
            raise ModelError("default with zero intensity")
        return math.log(m) - m
    return -m


# --------------------------------------------------------------------------
# panel likelihoods


def _frailty_on_cells(panel: FirmPanel, path: FrailtyPath) -> np.ndarray:
    lo, hi = panel.month_range
    return path.covering(lo, hi)[panel.month_index]


def complete_data_loglik(panel: FirmPanel, path: FrailtyPath, theta: Theta, dt: float = 1.0) -> float:
    """Log-likelihood of defaults and survivals given the frailty path."""
    if panel.n_cells == 0:
        return 0.0
    expo = panel.Z @ theta.kappa + theta.xi * _frailty_on_cells(panel, path)
    _check_exponent(expo)
    m = np.exp(expo) * dt
    d = panel.D == 1
    if np.any(m[d] == 0):
        k = int(np.flatnonzero(d & (m == 0))[0])
        raise ModelError(f"default with zero intensity: firm {panel.firm_ids[panel.cell_firm[k]]}, "
                         f"month {int(panel.month[k])}")
    return float(-m.sum() + np.log(m[d]).sum())


def log_prior(gamma, prior: PriorSpec) -> float:
    return prior.logpdf(gamma)


def log_posterior(panel: FirmPanel, path: FrailtyPath, theta: Theta, prior: PriorSpec,
                  dt: float = 1.0) -> float:
    """Complete-data log-likelihood plus the log prior on (kappa, xi)."""
    ll = complete_data_loglik(panel, path, theta, dt)
    if isinstance(prior, UniformPrior):
        return ll
    return ll + prior.logpdf(theta.gamma)


def grad_log_posterior_gamma(panel: FirmPanel, path: FrailtyPath, theta: Theta, prior: PriorSpec,
                             dt: float = 1.0) -> np.ndarray:
    """Gradient of :func:`log_posterior` with respect to (kappa, xi)."""
    if panel.n_cells == 0:
        return prior.grad(theta.gamma)
    obj = PathAveragedObjective.from_panel(panel, [path], prior, dt)
    return obj.gradient(theta.gamma)


# --------------------------------------------------------------------------
# path-averaged objective used by the M-step


@dataclass
class PathAveragedObjective:
    """Mean over frailty paths of the complete-data log-posterior in gamma.

    The paths enter only through per-month moments of ``exp(xi h)``, so each
    evaluation costs one pass over the cells regardless of the number of
    paths.  ``H`` holds the paths on the panel's month grid, shape
    ``(n_paths, n_months)``.
    """

    Z: np.ndarray
    D: np.ndarray
    t: np.ndarray
    H: np.ndarray
    prior: PriorSpec = field(default_factory=UniformPrior)
    dt: float = 1.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self._d = self.D == 1
        self.n_months = self.H.shape[1]
        self._h_mean = self.H.mean(axis=0)
        self._log_dt = math.log(self.dt)

    @classmethod
    def from_panel(cls, panel: FirmPanel, paths: Sequence[FrailtyPath] | np.ndarray,
                   prior: PriorSpec | None = None, dt: float = 1.0) -> "PathAveragedObjective":
        lo, hi = panel.month_range
        if isinstance(paths, np.ndarray):
            H = np.atleast_2d(paths)
            if H.shape[1] != panel.n_months:
                raise ModelError("path matrix must span the panel month range")
        else:
            H = np.array([p.covering(lo, hi) for p in paths])
        if H.shape[0] < 1:
            raise ModelError("need at least one frailty path")
        return cls(panel.Z, panel.D, panel.month_index, H, prior or UniformPrior(), dt)

    def _moments(self, xi: float, order: int):
        xh = xi * self.H
        _check_exponent(xh, " (frailty term)")
        e = np.exp(xh)
        out = [e.mean(axis=0)]
        if order >= 1:
            out.append((self.H * e).mean(axis=0))
        if order >= 2:
            out.append((self.H ** 2 * e).mean(axis=0))
        return out

    def _cells(self, kappa):
        eta = self.Z @ kappa
        _check_exponent(eta)
        return eta, np.exp(eta) * self.dt

    def value(self, gamma) -> float:
        gamma = np.asarray(gamma, dtype=float)
        kappa, xi = gamma[:-1], gamma[-1]
        eta, base = self._cells(kappa)
        (m0,) = self._moments(xi, 0)
        lam = base * m0[self.t]
        d = self._d
        if np.any(lam[d] == 0):
            raise ModelError("default with zero intensity")
        ll = -lam.sum() + (eta[d] + xi * self._h_mean[self.t[d]] + self._log_dt).sum()
        return float(ll) + self.prior.logpdf(gamma)

    def gradient(self, gamma) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        kappa, xi = gamma[:-1], gamma[-1]
        _, base = self._cells(kappa)
        m0, m1 = self._moments(xi, 1)
        lam = base * m0[self.t]
        g = np.empty_like(gamma)
        g[:-1] = (self._d - lam) @ self.Z
        g[-1] = self._h_mean[self.t[self._d]].sum() - (base * m1[self.t]).sum()
        return g + self.prior.grad(gamma)

    def hessian(self, gamma) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        kappa, xi = gamma[:-1], gamma[-1]
        _, base = self._cells(kappa)
        m0, m1, m2 = self._moments(xi, 2)
        lam = base * m0[self.t]
        n = gamma.size
        H = np.empty((n, n))
        H[:-1, :-1] = -(self.Z * lam[:, None]).T @ self.Z
        H[:-1, -1] = H[-1, :-1] = -(base * m1[self.t]) @ self.Z
        H[-1, -1] = -(base * m2[self.t]).sum()
        return H + self.prior.hess(gamma)
