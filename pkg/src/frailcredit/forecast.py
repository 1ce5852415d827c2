"""Default-probability term structures by Monte Carlo.

Covariates follow AR(1) laws (macro series fitted on the shared series, firm
covariates pooled across firms), the frailty follows its OU law from the
terminal estimation-window samples, and for each joint draw the horizon-``tau``
default probability is ``1 - exp(-sum_u lambda_u dt)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .model import (
    _MAX_EXPONENT,
    COVARIATES,
    FIRM_COLUMNS,
    MACRO_COLUMNS,
    N_COVARIATES,
    FirmPanel,
    ModelError,
    Theta,
)
from .ou import OuParams, simulate_paths

MIN_MACRO_MONTHS = 24
MIN_FIRM_TRANSITIONS = 100


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastConfig:
    horizon_months: int = 36
    n_draws: int = 500
    mode: str = "stochastic"            # or "point": covariates follow their conditional means
    origin_month: int | None = None     # first forecast month; default: month after the panel

    def __post_init__(self):
        if self.horizon_months < 1 or self.n_draws < 1:
            raise ValueError("horizon_months and n_draws must be >= 1")
        if self.mode not in ("stochastic", "point"):
            raise ValueError("mode must be 'stochastic' or 'point'")


@dataclass(frozen=True)
class CovariateForecastModel:
    """AR(1) ``x' = c + phi x + sd e`` per covariate, in column order
    treasury, sp500 (macro) and d2d .. firm_return (firm)."""

    intercept: np.ndarray
    phi: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        for name in ("intercept", "phi", "sd"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (N_COVARIATES - 1,):
                raise ValueError(f"{name} needs {N_COVARIATES - 1} entries")
            object.__setattr__(self, name, a)
        if np.any(self.sd < 0):
            raise ValueError("innovation sd must be >= 0")
        macro_phi = self.phi[[c - 1 for c in MACRO_COLUMNS]]
        if np.any(np.abs(macro_phi) >= 1):
            raise ForecastError(f"non-stationary macro dynamics: phi = {macro_phi.tolist()}")

    def step(self, x: np.ndarray, eps: np.ndarray | None = None) -> np.ndarray:
        """One month ahead for covariate rows ``x[..., 7]`` (constant excluded)."""
        out = self.intercept + self.phi * x
        if eps is not None:
            out = out + self.sd * eps
        return out


def _ar1_fit(prev: np.ndarray, cur: np.ndarray, name: str) -> tuple[float, float, float]:
    if prev.size < 3:
        raise ForecastError(f"too few observations to fit {name}")
    if np.ptp(prev) == 0:
        raise ForecastError(f"degenerate regressor: {name} has zero variance")
    X = np.column_stack([np.ones_like(prev), prev])
    coef, *_ = np.linalg.lstsq(X, cur, rcond=None)
    resid = cur - X @ coef
    sd = math.sqrt(float(resid @ resid) / (prev.size - 2))
    return float(coef[0]), float(coef[1]), sd


def fit_covariate_model(panel: FirmPanel, last_month: int | None = None) -> CovariateForecastModel:
    """Least-squares AR(1) per covariate on months up to ``last_month``."""
    first = panel.month_range[0]
    last = panel.month_range[1] if last_month is None else min(last_month, panel.month_range[1])
    macro = panel.macro[: last - first + 1]
    if macro.shape[0] < MIN_MACRO_MONTHS or np.isnan(macro).any():
        raise ForecastError(f"need {MIN_MACRO_MONTHS} consecutive months of macro history, "
                            f"have {int((~np.isnan(macro[:, 0])).sum())}")
    keep = panel.month <= last
    same_firm = np.zeros(panel.n_cells, dtype=bool)
    same_firm[1:] = (panel.cell_firm[1:] == panel.cell_firm[:-1]) & keep[1:] & keep[:-1]
    n_trans = int(same_firm.sum())
    if n_trans < MIN_FIRM_TRANSITIONS:
        raise ForecastError(f"need {MIN_FIRM_TRANSITIONS} pooled firm transitions, have {n_trans}")
    cur_idx = np.flatnonzero(same_firm)

    c, phi, sd = np.empty(N_COVARIATES - 1), np.empty(N_COVARIATES - 1), np.empty(N_COVARIATES - 1)
    for j, col in enumerate(MACRO_COLUMNS):
        c[col - 1], phi[col - 1], sd[col - 1] = _ar1_fit(macro[:-1, j], macro[1:, j], COVARIATES[col])
    for col in FIRM_COLUMNS:
        c[col - 1], phi[col - 1], sd[col - 1] = _ar1_fit(panel.Z[cur_idx - 1, col], panel.Z[cur_idx, col],
                                                         COVARIATES[col])
    return CovariateForecastModel(c, phi, sd)


def forecast_frailty(terminal_samples, ou: OuParams, tau: int, n_draws: int, rng) -> np.ndarray:
    """Future frailty paths, shape (n_draws, tau + 1); column 0 is the start.

    Each draw starts at a uniformly chosen terminal sample.  ``tau == 0``
    returns the terminal samples themselves as a single column.
    """
    terminal = np.asarray(terminal_samples, dtype=float).ravel()
    if terminal.size == 0:
        raise ForecastError("no terminal frailty samples")
    if tau == 0:
        return terminal[:, None].copy()
    start = terminal[np.asarray(rng.integers(0, terminal.size, size=n_draws))]
    return simulate_paths(ou, tau, start, rng)


@dataclass(frozen=True)
class PdTermStructure:
    firm_id: str
    pd: np.ndarray      # pd[k] is the probability of default within k + 1 months
    q: np.ndarray

    @property
    def horizons(self) -> np.ndarray:
        return np.arange(1, self.pd.size + 1)

    def at(self, tau: int) -> float:
        return float(self.pd[tau - 1])


def _covariate_paths(x0: np.ndarray, model: CovariateForecastModel, cols: np.ndarray, eps) -> np.ndarray:
    """Roll ``x0`` (values of the covariates ``cols``) forward; eps (n, tau, k) or None.

    Returns (n, tau, k) values for months 1..tau.
    """
    c, phi, sd = model.intercept[cols - 1], model.phi[cols - 1], model.sd[cols - 1]
    n, tau = eps.shape[:2]
    out = np.empty((n, tau, cols.size))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, cols.size))
    for u in range(tau):
        x = c + phi * x + sd * eps[:, u]
        out[:, u] = x
    return out


def simulate_macro(macro_state, model: CovariateForecastModel, tau: int, n_draws: int, rng,
                   point: bool = False) -> np.ndarray:
    """Macro paths (n_draws, tau, 2) from the current treasury / sp500 values."""
    cols = np.array(MACRO_COLUMNS)
    eps = np.zeros((n_draws, tau, cols.size)) if point else rng.standard_normal((n_draws, tau, cols.size))
    return _covariate_paths(macro_state, model, cols, eps)


def default_probability(firm_state, model: CovariateForecastModel, frailty_draws, theta: Theta, tau: int,
                        n_draws: int, rng, macro_paths: np.ndarray | None = None, point: bool = False,
                        firm_id: str = "", dt: float = 1.0) -> PdTermStructure:
    """Cumulative default probabilities for months 1..tau.

    Parameters
    ----------
    firm_state : (8,) covariate row for the month before the horizon starts
    frailty_draws : (M, >= tau + 1) frailty paths; column 0 is the current month.
        Draw ``k`` uses row ``k mod M``.
    macro_paths : optional (n_draws, tau, 2) shared macro scenarios; drawn from
        ``rng`` when omitted.
    point : firm (and own macro) covariates follow their conditional means.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    z0 = np.asarray(getattr(firm_state, "z", firm_state), dtype=float)
    H = np.atleast_2d(np.asarray(frailty_draws, dtype=float))
    if H.shape[1] < tau + 1:
        raise ValueError(f"frailty draws cover {H.shape[1] - 1} months, need {tau}")
    H = H[np.arange(n_draws) % H.shape[0], 1:tau + 1]

    fcols = np.array(FIRM_COLUMNS)
    eps = np.zeros((n_draws, tau, fcols.size)) if point else rng.standard_normal((n_draws, tau, fcols.size))
    X = np.empty((n_draws, tau, N_COVARIATES))
    X[..., 0] = 1.0
    X[..., list(fcols)] = _covariate_paths(z0[fcols], model, fcols, eps)
    if macro_paths is None:
        macro_paths = simulate_macro(z0[list(MACRO_COLUMNS)], model, tau, n_draws, rng, point)
    X[..., list(MACRO_COLUMNS)] = macro_paths[:n_draws, :tau]

    expo = X @ theta.kappa + theta.xi * H
    if np.any(expo > _MAX_EXPONENT):
        k = int(np.flatnonzero((expo > _MAX_EXPONENT).any(axis=1))[0])
        raise ModelError(f"intensity overflow in draw {k}" + (f" for firm {firm_id}" if firm_id else ""))
    cum = np.cumsum(np.exp(expo) * dt, axis=1)
    pd = np.mean(-np.expm1(-cum), axis=0)
    pd = np.maximum.accumulate(np.clip(pd, 0.0, 1.0))
    return PdTermStructure(firm_id, pd, 1.0 - pd)


def _alive_for_forecast(panel: FirmPanel, origin: int, require_survival: bool) -> list[int]:
    """Firms with a non-default row in month ``origin - 1``.

    With ``require_survival`` the firm must also be observed in ``origin``
    (used for cohorts, where the firm has to be alive at the start).
    """
    out = []
    entry, exit_ = panel.entry_months, panel.exit_months
    for k in range(panel.n_firms):
        if not entry[k] <= origin - 1 <= exit_[k]:
            continue
        if require_survival and exit_[k] < origin:
            continue
        s = panel.firm_slice(k)
        if panel.D[s][origin - 1 - entry[k]] == 1:
            continue
        out.append(k)
    return out


def forecast_panel(panel: FirmPanel, theta: Theta, terminal_samples, end_month: int,
                   model: CovariateForecastModel, cfg: ForecastConfig, seed: int,
                   origin: int | None = None, firms: list[int] | None = None, threads: int = 1,
                   dt: float = 1.0) -> list[PdTermStructure]:
    """Term structures for firms alive at ``origin`` (default: the month after the panel).

    The frailty is propagated from ``end_month`` (where ``terminal_samples``
    live) to ``origin - 1`` and then over the horizon; macro scenarios are
    shared by all firms.  Results do not depend on ``threads``.
    """
    if origin is None:
        origin = cfg.origin_month if cfg.origin_month is not None else panel.month_range[1] + 1
    gap = origin - 1 - end_month
    if gap < 0:
        raise ForecastError(f"origin month {origin} precedes the end of the estimation window ({end_month})")
    if not panel.month_range[0] <= origin - 1 <= panel.month_range[1]:
        raise ForecastError(f"no covariates observed in month {origin - 1}")
    tau, n = cfg.horizon_months, cfg.n_draws
    point = cfg.mode == "point"

    ou = OuParams(theta.eta, theta.sigma, dt)
    H = forecast_frailty(terminal_samples, ou, gap + tau, n,
                         np.random.default_rng(rngs.derive_seed(seed, "frailty", origin)))[:, gap:]
    macro_state = panel.macro[origin - 1 - panel.month_range[0]]
    macro = simulate_macro(macro_state, model, tau, n,
                           np.random.default_rng(rngs.derive_seed(seed, "macro", origin)), point)
    if firms is None:
        firms = _alive_for_forecast(panel, origin, require_survival=False)

    def one(k):
        fid = panel.firm_ids[k]
        row = panel.Z[panel.firm_slice(k)][origin - 1 - panel.entry_months[k]]
        rng = np.random.default_rng(rngs.derive_seed(seed, "firm", fid, origin))
        return default_probability(row, model, H, theta, tau, n, rng, macro, point, fid, dt)

    if threads > 1 and len(firms) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, firms))
    return [one(k) for k in firms]


def write_pd_table(structures: list[PdTermStructure], path) -> None:
    with open(path, "w") as fh:
        fh.write("firm_id,horizon,pd\n")
        for s in structures:
            for h, p in zip(s.horizons, s.pd):
                fh.write(f"{s.firm_id},{h},{float(p)!r}\n")


def read_pd_table(path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "firm_id,horizon,pd":
            raise ForecastError(f"{path}: unexpected header {header!r}")
        for line in fh:
            fid, h, p = line.rstrip("\n").split(",")
            out.setdefault(fid, []).append((int(h), float(p)))
    return {f: np.array([p for _, p in sorted(v)]) for f, v in out.items()}
