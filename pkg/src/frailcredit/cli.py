"""Command-line front end.

    frailcredit simulate|estimate|forecast|backtest|cap-plot
        [--config PATH] --out DIR [--seed N] [--threads N] [-v]

Every failure prints one line ``error: <category>: <message>`` on stderr and
exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .data_io import ConfigError
from .estimation import EstimationError, ThetaEstimate, em_estimate
from .evaluation import (
    EvaluationError,
    ScoredCohort,
    accuracy_ratio,
    backtest,
    cap_curve,
    cohort_members,
)
from .forecast import ForecastError, fit_covariate_model, forecast_panel, read_pd_table, write_pd_table
from .model import ModelError, PanelError, Theta, UniformPrior

log = logging.getLogger("frailcredit")

ROW_LABELS = (
    "Constant", "TREASURY", "SP500", "D2D", "FIRM SIZE", "ROA", "LEVERAGE", "FIRM RETURN",
    "Hidden-factor volatility", "Hidden-factor mean reversion", "Brownian motion volatility",
)
REPORT_HEADER = ("Predictor", "Coefficient", "Asymptotic Standard Error", "t-Statistic",
                 "95% CI Lower Bound", "95% CI Upper Bound")
OBS_FOOTER = "No. of firm-month observations"
LOGLIK_FOOTER = "Log-likelihood"


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# --------------------------------------------------------------------------
# fit files


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def fit_report_csv(est: ThetaEstimate) -> str:
    lines = [",".join(REPORT_HEADER)]
    for label, (_, coef, se, t, lo, hi) in zip(ROW_LABELS, est.rows()):
        lines.append(",".join([label, _num(coef), _num(se), _num(t), _num(lo), _num(hi)]))
    lines.append(f"{OBS_FOOTER},{est.n_obs}")
    lines.append(f"{LOGLIK_FOOTER},{_num(est.log_marginal)}")
    return "\n".join(lines) + "\n"


def fit_report_table(est: ThetaEstimate) -> str:
    head = f"{'Predictor':<30}{'Coefficient':>12}{'Std. Error':>12}{'t-Stat':>10}{'CI Lower':>11}{'CI Upper':>11}"
    out = [head, "-" * len(head)]
    for label, (_, coef, se, t, lo, hi) in zip(ROW_LABELS, est.rows()):
        out.append(f"{label:<30}{coef:>12.4f}{se:>12.4f}{t:>10.2f}{lo:>11.4f}{hi:>11.4f}")
    out.append("-" * len(head))
    out.append(f"{OBS_FOOTER:<30}{est.n_obs:>12d}")
    out.append(f"{LOGLIK_FOOTER:<30}{est.log_marginal:>12.2f}")
    return "\n".join(out) + "\n"


def fit_to_json(est: ThetaEstimate) -> dict:
    return {
        "theta": data_io.theta_to_dict(est.theta),
        "se": [_float_or_none(x) for x in est.se],
        "prior": est.prior_kind,
        "end_month": est.end_month,
        "n_obs": est.n_obs,
        "log_marginal": _float_or_none(est.log_marginal),
        "objective": est.loglik,
        "iterations": est.iterations,
        "converged": est.converged,
        "trace": [float(x) for x in est.trace],
        "terminal_samples": [float(x) for x in est.terminal_samples],
    }


def _float_or_none(x):
    x = float(x)
    return None if math.isnan(x) else x


def load_fit(path) -> tuple[Theta, np.ndarray, int]:
    try:
        doc = json.loads(Path(path).read_text())
        theta = data_io.theta_from_dict(doc["theta"])
        samples = np.array(doc["terminal_samples"], dtype=float)
        end = int(doc["end_month"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError("fit", f"cannot read fit file {path}: {exc}") from None
    return theta, samples, end


# --------------------------------------------------------------------------
# commands


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _panel(cfg, override):
    return data_io.load_panel(Path(override) if override else cfg.path("panel"))


def cmd_simulate(cfg, args) -> None:
    out = _out_dir(args.out)
    panel, truth = data_io.generate_synthetic(cfg.generator)
    data_io.save_panel(panel, out / "panel.csv")
    data_io.save_truth(truth, cfg.generator, out / "truth.json")
    print(f"simulated {panel.n_firms} firms, {panel.n_cells} firm-months, {panel.n_defaults} defaults "
          f"-> {out / 'panel.csv'}")


def cmd_estimate(cfg, args) -> None:
    out = _out_dir(args.out)
    panel = _panel(cfg, args.panel)
    if cfg.em_last_month is not None:
        panel = panel.window(panel.month_range[0], cfg.em_last_month)
    est = em_estimate(panel, cfg.prior, cfg.em)
    (out / "fit_report.csv").write_text(fit_report_csv(est))
    (out / "fit_report.txt").write_text(fit_report_table(est))
    (out / "fit.json").write_text(json.dumps(fit_to_json(est), indent=2) + "\n")
    if not est.converged:
        log.warning("EM stopped at the iteration cap (%d) before meeting the tolerance", est.iterations)
    sys.stdout.write(fit_report_table(est))


def cmd_forecast(cfg, args) -> None:
    out = _out_dir(args.out)
    panel = _panel(cfg, args.panel)
    theta, samples, end = load_fit(Path(args.fit) if args.fit else cfg.path("fit"))
    model = fit_covariate_model(panel, end)
    origin = cfg.forecast.origin_month if cfg.forecast.origin_month is not None else end + 1
    pds = forecast_panel(panel, theta, samples, end, model, cfg.forecast, cfg.seed, origin=origin,
                         threads=args.threads)
    write_pd_table(pds, out / "pd_table.csv")
    print(f"forecast {len(pds)} firms from month {origin}, horizons 1..{cfg.forecast.horizon_months} "
          f"-> {out / 'pd_table.csv'}")


def cmd_backtest(cfg, args) -> None:
    out = _out_dir(args.out)
    panel = _panel(cfg, args.panel)
    priors = {"uniform": UniformPrior()}
    if "gaussian" in cfg.backtest.models:
        priors["gaussian"] = cfg.prior
    report = backtest(panel, cfg.backtest, cfg.em, priors, cfg.forecast, cfg.seed, threads=args.threads)
    (out / "backtest.csv").write_text(report.to_csv())
    (out / "backtest.txt").write_text(report.format_table())
    with open(out / "cap_curves.csv", "w") as fh:
        fh.write("model,horizon_years,year,x,y\n")
        for m, h, y, xx, yy in report.curve_rows():
            fh.write(f"{m},{h},{y},{xx!r},{yy!r}\n")
    if cfg.figures:
        from .plotting import plot_ar_by_horizon, plot_cap_curves
        for m in report.models:
            for h in report.horizons:
                curves = {y: report.curves[(m, h, y)] for y in report.years if (m, h, y) in report.curves}
                if curves:
                    plot_cap_curves(curves, out / f"cap_{m}_{h}y.png", f"{m}, {h}-year horizon")
        plot_ar_by_horizon(report, out / "ar_by_horizon.png")
    sys.stdout.write(report.format_table())


def cmd_cap_plot(cfg, args) -> None:
    out = _out_dir(args.out)
    panel = _panel(cfg, args.panel)
    table = read_pd_table(Path(args.pd_table) if args.pd_table else cfg.path("pd_table"))
    origin = cfg.forecast.origin_month
    if origin is None:
        raise ConfigError("forecast.origin_month", "required by cap-plot to label outcomes")
    tau = min(cfg.forecast.horizon_months, min(len(v) for v in table.values()))
    if origin + tau - 1 > panel.month_range[1]:
        raise CliError("data", f"panel ends in month {panel.month_range[1]}; outcomes over months "
                               f"{origin}..{origin + tau - 1} are not observed")
    idx, labels = cohort_members(panel, origin, tau)
    pos = {panel.firm_ids[k]: j for j, k in enumerate(idx)}
    ids = [f for f in table if f in pos]
    if not ids:
        raise CliError("data", "no firm in the PD table is alive in the panel at the forecast origin")
    cohort = ScoredCohort(tuple(ids), np.array([table[f][tau - 1] for f in ids]),
                          np.array([labels[pos[f]] for f in ids]), tau)
    curve = cap_curve(cohort)
    with open(out / "cap_curve.csv", "w") as fh:
        fh.write("x,y\n")
        for x, y in zip(curve.x, curve.y):
            fh.write(f"{float(x)!r},{float(y)!r}\n")
    try:
        ar = accuracy_ratio(curve)
        msg = f"accuracy ratio {ar:.4f}"
    except EvaluationError as exc:
        msg = str(exc)
    if cfg.figures:
        from .plotting import plot_cap_curves
        plot_cap_curves({f"{tau}-month": curve}, out / "cap_curve.png")
    print(f"{len(ids)} firms, {cohort.n_defaults} defaults within {tau} months; {msg}")


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "forecast": cmd_forecast,
    "backtest": cmd_backtest,
    "cap-plot": cmd_cap_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frailcredit", description="Frailty-correlated default models.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run configuration (JSON); default: the shipped configuration")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="overrides the configured seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        s.add_argument("-v", "--verbose", action="count", default=0)
        if name != "simulate":
            s.add_argument("--panel", help="panel CSV; default: paths.panel from the configuration")
        if name == "forecast":
            s.add_argument("--fit", help="fit.json; default: paths.fit from the configuration")
        if name == "cap-plot":
            s.add_argument("--pd-table", dest="pd_table", help="PD table; default: paths.pd_table")
    return p


def _fail(category: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"error: {category}: {text}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg = data_io.load_config(args.config) if args.config else data_io.load_default_config()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail("config", exc)
    except PanelError as exc:
        return _fail("panel", exc)
    except CliError as exc:
        return _fail(exc.category, exc)
    except (EstimationError, ModelError) as exc:
        return _fail("estimation" if isinstance(exc, EstimationError) else "model", exc)
    except (ForecastError, EvaluationError) as exc:
        return _fail("forecast" if isinstance(exc, ForecastError) else "evaluation", exc)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''} {exc.strerror or exc}")
    except ValueError as exc:
        return _fail("value", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
