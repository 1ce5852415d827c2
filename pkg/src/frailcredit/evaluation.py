"""CAP curves, accuracy ratios, the logistic baseline and cohort backtests.

Backtest layout: firms are split in half by a stable hash of their id; the
first half is used for estimation on the training window, the second half is
scored.  A report column is a calendar year ``Y`` and the cell for a
``h``-year horizon holds the accuracy ratio of the cohort that starts in
January of ``Y - h + 1`` and is followed until the end of ``Y``.  Cohorts
that would start inside the training window are left blank, giving the
triangular shape of a standard cohort table.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import rng as rngs
from .model import FirmPanel, month_to_year, year_to_month

log = logging.getLogger(__name__)

MODEL_NAMES = ("uniform", "gaussian", "logistic")


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# CAP and AR


@dataclass(frozen=True)
class ScoredCohort:
    firm_ids: tuple
    scores: np.ndarray
    labels: np.ndarray
    horizon: int = 12
    cohort_year: int = 0

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        y = np.asarray(self.labels)
        if s.ndim != 1 or s.shape != y.shape or len(self.firm_ids) != s.size:
            raise ValueError("firm_ids, scores and labels must have equal length")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "firm_ids", tuple(self.firm_ids))
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def n_defaults(self) -> int:
        return int(self.labels.sum())

    @property
    def default_rate(self) -> float:
        return self.n_defaults / self.n


@dataclass(frozen=True)
class CapCurve:
    """Vertices of a CAP; straight segments between them.

    ``firms`` and ``defaults`` are the integer cumulative counts at each
    vertex, one vertex per tie group plus the origin.
    """

    x: np.ndarray
    y: np.ndarray
    firms: np.ndarray
    defaults: np.ndarray

    @property
    def n_firms(self) -> int:
        return int(self.firms[-1])

    @property
    def n_defaults(self) -> int:
        return int(self.defaults[-1])


def cap_curve(cohort: ScoredCohort) -> CapCurve:
    """Cumulative accuracy profile, firms ranked by descending score.

    Tied scores form one group crossed by a straight segment, which equals
    the average over all orderings within the group.
    """
    if cohort.n == 0:
        raise ValueError("empty cohort")
    order = np.argsort(-cohort.scores, kind="stable")
    s = cohort.scores[order]
    y = cohort.labels[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    firms = np.r_[0, ends + 1]
    defaults = np.r_[0, np.cumsum(y)[ends]]
    n, k = cohort.n, int(y.sum())
    x = firms / n
    yy = defaults / k if k else x.copy()
    return CapCurve(x, yy, firms, defaults)


def accuracy_ratio(curve, default_rate: float | None = None) -> float:
    """Area between the curve and the diagonal over the perfect model's area.

    For a :class:`CapCurve` and no ``default_rate`` the ratio is computed from
    integer counts, so perfect and constant scores give exactly 1 and 0.
    Otherwise ``curve`` may be any ``(x, y)`` pair and the area is a trapezoid
    sum with perfect-model area ``(1 - default_rate) / 2``.
    """
    if isinstance(curve, CapCurve) and default_rate is None:
        n, k = curve.n_firms, curve.n_defaults
        if k == 0 or k == n:
            raise EvaluationError("AR undefined: cohort has a single class")
        f, d = curve.firms, curve.defaults
        # 2 n k * area, exactly
        twice = int(np.sum(np.diff(f) * (d[1:] + d[:-1])))
        return (twice - n * k) / (k * (n - k))
    if default_rate is None:
        raise ValueError("default_rate required for a plain curve")
    if not 0 < default_rate < 1:
        raise EvaluationError("AR undefined: default rate must lie strictly between 0 and 1")
    x, y = (curve.x, curve.y) if isinstance(curve, CapCurve) else (np.asarray(curve[0]), np.asarray(curve[1]))
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1])) / 2)
    return (area - 0.5) / ((1 - default_rate) / 2)


def cohort_accuracy_ratio(cohort: ScoredCohort) -> float:
    return accuracy_ratio(cap_curve(cohort))


# --------------------------------------------------------------------------
# logistic baseline


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    iterations: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def monthly_probability(self, X) -> np.ndarray:
        return expit(np.asarray(X, dtype=float) @ self.coef)

    def horizon_probability(self, X, months: int) -> np.ndarray:
        """``1 - (1 - p)^months`` with the covariates held at ``X``."""
        eta = np.asarray(X, dtype=float) @ self.coef
        # log(1 - p) = -log(1 + e^eta)
        return -np.expm1(-months * np.logaddexp(0.0, eta))


def fit_logistic(X, y, grad_tol: float = 1e-8, max_iter: int = 100) -> LogisticFit:
    """Logistic regression by iteratively reweighted least squares (Newton)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n1 = y.sum()
    if n1 == 0 or n1 == y.size:
        raise EvaluationError("logistic regression needs both classes in the training data")
    beta = np.zeros(X.shape[1])
    rate = n1 / y.size
    if np.allclose(X[:, 0], 1.0):
        beta[0] = math.log(rate / (1 - rate))
    for it in range(1, max_iter + 1):
        eta = X @ beta
        if np.max(np.abs(eta)) > 35:
            raise EvaluationError("separable data: fitted probabilities reach 0 or 1")
        p = expit(eta)
        g = X.T @ (y - p)
        w = p * (1 - p)
        H = (X * w[:, None]).T @ X
        if np.linalg.norm(g) <= grad_tol:
            return LogisticFit(beta, np.linalg.inv(H), it - 1)
        try:
            beta = beta + np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise EvaluationError("singular information matrix in logistic regression") from None
    raise EvaluationError(f"separable data: IRLS did not reach gradient norm {grad_tol} "
                          f"in {max_iter} iterations")


def logistic_baseline(train: FirmPanel, cohort_X, firm_ids, labels, horizon: int,
                      cohort_year: int = 0, fit: LogisticFit | None = None) -> tuple[ScoredCohort, LogisticFit]:
    """Fit on the training cells and score a cohort by compounded monthly probabilities."""
    fit = fit or fit_logistic(train.Z, train.D)
    scores = fit.horizon_probability(cohort_X, horizon)
    return ScoredCohort(tuple(firm_ids), scores, np.asarray(labels), horizon, cohort_year), fit


# --------------------------------------------------------------------------
# backtest


@dataclass(frozen=True)
class BacktestConfig:
    train_end_month: int | None = None
    horizons_years: tuple = (1, 2, 3)
    models: tuple = MODEL_NAMES
    max_test_years: int = 7

    def __post_init__(self):
        if not self.horizons_years or min(self.horizons_years) < 1:
            raise ValueError("horizons must be positive")
        bad = set(self.models) - set(MODEL_NAMES)
        if bad:
            raise ValueError(f"unknown backtest models {sorted(bad)}")


def split_firms(firm_ids) -> tuple[list, list]:
    """Estimation and evaluation halves by a stable hash of the id."""
    ranked = sorted(firm_ids, key=lambda f: (rngs.stable_hash(f), f))
    half = len(ranked) // 2
    return sorted(ranked[:half]), sorted(ranked[half:])


def default_train_end(panel: FirmPanel, max_test_years: int = 7) -> int:
    """Last month of the training window: leaves up to ``max_test_years``
    full calendar years (and at most half the years) for evaluation."""
    first, last = panel.month_range
    last_full = month_to_year(last + 1) - 1
    first_full = month_to_year(first) if first == year_to_month(month_to_year(first)) else month_to_year(first) + 1
    n_years = last_full - first_full + 1
    test = min(max_test_years, n_years // 2)
    if test < 1:
        raise EvaluationError("panel too short for a backtest: need two full calendar years")
    return year_to_month(last_full - test + 1) - 1


def backtest_years(panel: FirmPanel, train_end: int) -> list[int]:
    first_test = month_to_year(train_end + 1)
    if year_to_month(first_test) != train_end + 1:
        first_test += 1
    last_full = month_to_year(panel.month_range[1] + 1) - 1
    return list(range(first_test, last_full + 1))


def cohort_members(panel: FirmPanel, start: int, months: int) -> tuple[list[int], np.ndarray]:
    """Firms alive at ``start`` and their default-within-horizon labels.

    Alive: observed without default in ``start - 1`` and still observed in
    ``start``.  Censored exits count as survivals.
    """
    idx, labels = [], []
    for k in range(panel.n_firms):
        e, x = int(panel.entry_months[k]), int(panel.exit_months[k])
        if not (e <= start - 1 and x >= start):
            continue
        s = panel.firm_slice(k)
        d = panel.D[s]
        if d[start - 1 - e] == 1:
            continue
        idx.append(k)
        labels.append(int(d[-1] == 1 and x <= start + months - 1))
    return idx, np.array(labels, dtype=np.int64)


@dataclass
class BacktestReport:
    years: list
    horizons: list                  # years
    models: list
    cells: dict = field(default_factory=dict)     # (model, h, year) -> AR, or None when undefined
    curves: dict = field(default_factory=dict)    # (model, h, year) -> CapCurve
    cohort_sizes: dict = field(default_factory=dict)   # (h, year) -> (firms, defaults)
    train_end: int = 0

    def applicable(self, h: int, year: int) -> bool:
        return (h, year) in self.cohort_sizes

    def average(self, model: str, h: int) -> float:
        vals = [v for (m, hh, _), v in self.cells.items() if m == model and hh == h and v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def n_undefined(self, model: str, h: int) -> int:
        return sum(1 for (m, hh, _), v in self.cells.items() if m == model and hh == h and v is None)

    def _cell_text(self, model, h, year, fmt) -> str:
        if not self.applicable(h, year):
            return ""
        v = self.cells.get((model, h, year))
        return "undefined" if v is None else fmt(v)

    def to_csv(self) -> str:
        head = ["model", "horizon_years"] + [str(y) for y in self.years] + ["average", "undefined_cells"]
        lines = [",".join(head)]
        for model in self.models:
            for h in self.horizons:
                avg = self.average(model, h)
                row = [model, str(h)] + [self._cell_text(model, h, y, repr) for y in self.years]
                row += ["" if math.isnan(avg) else repr(avg), str(self.n_undefined(model, h))]
                lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        w = 9
        head = f"{'Model':<10}{'Horizon':<9}" + "".join(f"{y:>{w}}" for y in self.years) + f"{'Average':>{w}}"
        out = [head, "-" * len(head)]
        for model in self.models:
            for h in self.horizons:
                cells = "".join(f"{self._cell_text(model, h, y, lambda v: f'{v:.4f}'):>{w}}"
                                for y in self.years)
                avg = self.average(model, h)
                label = f"{h}-year"
                out.append(f"{model:<10}{label:<9}{cells}{('' if math.isnan(avg) else f'{avg:.4f}'):>{w}}")
        return "\n".join(out) + "\n"

    def curve_rows(self):
        """(model, horizon_years, year, x, y) for every stored CAP vertex."""
        for (model, h, year), c in sorted(self.curves.items()):
            for x, y in zip(c.x, c.y):
                yield model, h, year, float(x), float(y)


def backtest(panel: FirmPanel, cfg: BacktestConfig, em_cfg=None, priors: dict | None = None,
             forecast_cfg=None, seed: int = 0, threads: int = 1, estimates: dict | None = None,
             dt: float = 1.0) -> BacktestReport:
    """Out-of-sample cohort backtest.

    ``priors`` maps frailty model names ("uniform", "gaussian") to priors.
    ``estimates`` may hold precomputed fits per model name (objects with
    ``theta`` and ``terminal_samples``), skipping estimation.
    """
    from .estimation import EmConfig, em_estimate
    from .forecast import ForecastConfig, fit_covariate_model, forecast_panel
    from .model import UniformPrior

    em_cfg = em_cfg or EmConfig()
    forecast_cfg = forecast_cfg or ForecastConfig()
    priors = dict(priors or {})
    priors.setdefault("uniform", UniformPrior())
    estimates = dict(estimates or {})

    train_end = cfg.train_end_month if cfg.train_end_month is not None else default_train_end(
        panel, cfg.max_test_years)
    years = backtest_years(panel, train_end)
    if not years:
        raise EvaluationError(f"no full calendar year after the training window ending in month {train_end}")
    est_ids, eval_ids = split_firms(panel.firm_ids)
    first = panel.month_range[0]
    est_panel = panel.subset(est_ids)
    train = est_panel.window(first, train_end)
    if train.n_defaults == 0:
        raise EvaluationError("no defaults in the training window")
    evaluation = panel.subset(eval_ids)
    cov_model = fit_covariate_model(est_panel, train_end)

    horizons = sorted(cfg.horizons_years)
    report = BacktestReport(years, horizons, list(cfg.models), train_end=train_end)
    # start year -> longest horizon needed
    starts: dict[int, int] = {}
    for h in horizons:
        for Y in years:
            S = Y - h + 1
            if S >= years[0]:
                starts[S] = max(starts.get(S, 0), h)

    frailty_models = [m for m in cfg.models if m != "logistic"]
    for m in frailty_models:
        if m not in estimates:
            if m not in priors:
                raise EvaluationError(f"no prior configured for model {m!r}")
            log.info("backtest: estimating %s-prior model on %d firms", m, train.n_firms)
            estimates[m] = em_estimate(train, priors[m], em_cfg)
    logit = fit_logistic(train.Z, train.D) if "logistic" in cfg.models else None

    for S, hmax in sorted(starts.items()):
        s = year_to_month(S)
        members_by_h = {h: cohort_members(evaluation, s, 12 * h) for h in horizons if S + h - 1 in years}
        idx = members_by_h[min(members_by_h)][0]
        if not idx:
            continue
        scores: dict[str, dict[int, np.ndarray]] = {}
        for m in frailty_models:
            est = estimates[m]
            fc = replace(forecast_cfg, horizon_months=12 * hmax)
            pds = forecast_panel(evaluation, est.theta, est.terminal_samples, train_end, cov_model, fc,
                                 rngs.derive_seed(seed, "backtest", m), origin=s, firms=idx,
                                 threads=threads, dt=dt)
            P = np.array([p.pd for p in pds])
            scores[m] = {h: P[:, 12 * h - 1] for h in members_by_h}
        if logit is not None:
            X0 = np.array([evaluation.Z[evaluation.firm_slice(k)][s - 1 - evaluation.entry_months[k]]
                           for k in idx])
            scores["logistic"] = {h: logit.horizon_probability(X0, 12 * h) for h in members_by_h}

        for h, (members, labels) in members_by_h.items():
            Y = S + h - 1
            report.cohort_sizes[(h, Y)] = (len(members), int(labels.sum()))
            ids = tuple(evaluation.firm_ids[k] for k in members)
            for m in cfg.models:
                cohort = ScoredCohort(ids, scores[m][h], labels, 12 * h, Y)
                curve = cap_curve(cohort)
                report.curves[(m, h, Y)] = curve
                try:
                    report.cells[(m, h, Y)] = accuracy_ratio(curve)
                except EvaluationError:
                    report.cells[(m, h, Y)] = None
    return report
