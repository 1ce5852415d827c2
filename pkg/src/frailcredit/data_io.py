"""Panel CSV files, synthetic panels and run configuration.

Panel CSV columns::

    firm_id,month,treasury,sp500,d2d,firm_size,roa,leverage,firm_return,default

one row per firm-month, ``month`` counted from January 1980.  Floats are
written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .estimation import EmConfig, OptimizerConfig
from .evaluation import BacktestConfig
from .forecast import ForecastConfig
from .model import (
    COVARIATES,
    N_COVARIATES,
    FirmPanel,
    FirmRecord,
    FrailtyPath,
    GaussianPrior,
    ModelError,
    PanelError,
    PriorSpec,
    Theta,
    UniformPrior,
    month_to_year,
    year_to_month,
)
from .ou import OuParams, transition_params
from .smc import SmcConfig

log = logging.getLogger(__name__)

PANEL_COLUMNS = ("firm_id", "month") + COVARIATES[1:] + ("default",)

# --------------------------------------------------------------------------
# panel CSV


def save_panel(panel: FirmPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        for k in range(panel.n_firms):
            s = panel.firm_slice(k)
            fid = panel.firm_ids[k]
            for m, z, d in zip(panel.month[s], panel.Z[s], panel.D[s]):
                w.writerow([fid, int(m), *(repr(float(x)) for x in z[1:]), int(d)])


def _parse_float(text: str, where: str) -> float:
    if text is None or text.strip() == "":
        raise PanelError(f"{where}: missing value")
    try:
        x = float(text)
    except ValueError:
        raise PanelError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(x):
        raise PanelError(f"{where}: missing or non-finite value {text!r}")
    return x


def load_panel(path) -> FirmPanel:
    """Read and validate a panel CSV.

    Raises :class:`PanelError` naming the file line, firm and month for
    missing values, gaps, duplicate months, defaults before exit and macro
    disagreements between firms.
    """
    by_firm: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PANEL_COLUMNS:
            raise PanelError(f"{path}: header must be {','.join(PANEL_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PANEL_COLUMNS):
                raise PanelError(f"line {lineno}: expected {len(PANEL_COLUMNS)} fields, got {len(row)}")
            fid = row[0].strip()
            try:
                month = int(row[1])
            except ValueError:
                raise PanelError(f"line {lineno}: bad month {row[1]!r}") from None
            where = f"line {lineno} (firm {fid}, month {month})"
            z = [1.0] + [_parse_float(row[2 + j], f"{where}, column {COVARIATES[1 + j]}")
                         for j in range(N_COVARIATES - 1)]
            if row[-1].strip() not in ("0", "1"):
                raise PanelError(f"{where}: default must be 0 or 1")
            by_firm.setdefault(fid, []).append((month, z, int(row[-1]), lineno))

    records = []
    for fid, rows in by_firm.items():
        rows.sort(key=lambda r: r[0])
        months = [r[0] for r in rows]
        for prev, cur in zip(months, months[1:]):
            if cur == prev:
                raise PanelError(f"firm {fid}, month {cur}: duplicate month")
            if cur != prev + 1:
                raise PanelError(f"firm {fid}, month {prev + 1}: month gap (next row is month {cur})")
        d = [r[2] for r in rows]
        if 1 in d[:-1]:
            m = months[d.index(1)]
            raise PanelError(f"firm {fid}, month {m}: default before the firm's last month")
        records.append(FirmRecord(fid, months[0], months[-1], np.array([r[1] for r in rows]), np.array(d)))
    return FirmPanel(records)


# --------------------------------------------------------------------------
# synthetic panels

REFERENCE_THETA = Theta(
    kappa=np.array([-3.4556, -0.1175, -1.0620, -0.6309, -0.1856, -0.3807, 0.5570, -1.2134]),
    xi=0.0897, eta=0.6189, sigma=12.5069,
)


@dataclass(frozen=True)
class Ar1Spec:
    mean: float
    sd: float       # stationary standard deviation
    phi: float

    def __post_init__(self):
        if not abs(self.phi) < 1 or self.sd < 0:
            raise ValueError(f"AR(1) spec must be stationary with sd >= 0: {self}")


def _default_macro():
    return {"treasury": Ar1Spec(4.6837, 3.1343, 0.95), "sp500": Ar1Spec(0.1048, 0.1534, 0.90)}


def _default_firm():
    return {
        "d2d": Ar1Spec(0.8, 1.4412, 0.97),
        "firm_size": Ar1Spec(17.0, 1.8422, 0.99),
        "roa": Ar1Spec(0.0105, 0.0449, 0.90),
        "leverage": Ar1Spec(0.5671, 0.2438, 0.97),
        "firm_return": Ar1Spec(-0.0356, 0.4603, 0.92),
    }


@dataclass(frozen=True)
class GeneratorSpec:
    n_firms: int = 500
    n_months: int = 120
    theta_true: Theta = REFERENCE_THETA
    macro: dict = field(default_factory=_default_macro)
    firm: dict = field(default_factory=_default_firm)
    start_fraction: float = 0.7     # firms alive from month 0; the rest enter later
    censor_rate: float = 0.002      # monthly probability of leaving without default
    first_month: int = 0
    h0_mode: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.n_firms < 1 or self.n_months < 1:
            raise ValueError("generator needs positive n_firms and n_months")
        if set(self.macro) != {"treasury", "sp500"}:
            raise ValueError("macro dynamics must cover treasury and sp500")
        if set(self.firm) != set(COVARIATES[3:]):
            raise ValueError(f"firm dynamics must cover {COVARIATES[3:]}")
        if not 0 <= self.censor_rate < 1 or not 0 < self.start_fraction <= 1:
            raise ValueError("censor_rate in [0, 1) and start_fraction in (0, 1] required")


@dataclass
class SyntheticTruth:
    theta: Theta
    frailty: FrailtyPath
    h_anchor: float


def _ar1_paths(spec: Ar1Spec, x0, eps):
    """Rows of AR(1) paths started at ``x0`` driven by standard normals ``eps``."""
    x = np.empty(eps.shape)
    x[:, 0] = x0
    s = spec.sd * math.sqrt(1 - spec.phi ** 2)
    for t in range(1, eps.shape[1]):
        x[:, t] = spec.mean + spec.phi * (x[:, t - 1] - spec.mean) + s * eps[:, t]
    return x


def generate_synthetic(spec: GeneratorSpec) -> tuple[FirmPanel, SyntheticTruth]:
    """Simulate a panel from the frailty model.

    Covariates, frailty, censoring times and the per-cell default uniforms
    come from separate child streams, so changing ``theta_true`` with the
    same seed only moves default times (earlier when intensities rise).
    """
    T, n = spec.n_months, spec.n_firms
    ss = np.random.SeedSequence(spec.seed)
    g_macro, g_frailty, g_firm, g_entry, g_default = (np.random.default_rng(s) for s in ss.spawn(5))
    th = spec.theta_true

    macro = np.empty((2, T))
    for j, name in enumerate(("treasury", "sp500")):
        m = spec.macro[name]
        eps = g_macro.standard_normal((1, T))
        macro[j] = _ar1_paths(m, m.mean + m.sd * eps[0, 0], eps)[0]

    ou = OuParams(th.eta, th.sigma)
    a, v = transition_params(ou)
    if spec.h0_mode == "stationary":
        anchor = math.sqrt(ou.stationary_variance) * g_frailty.standard_normal()
    else:
        anchor = 0.0
    e = g_frailty.standard_normal(T)
    h = np.empty(T)
    prev = anchor
    for t in range(T):
        prev = h[t] = a * prev + math.sqrt(v) * e[t]

    firm_cov = np.empty((len(COVARIATES) - 3, n, T))
    for j, name in enumerate(COVARIATES[3:]):
        f = spec.firm[name]
        eps = g_firm.standard_normal((n, T))
        firm_cov[j] = _ar1_paths(f, f.mean + f.sd * eps[:, 0], eps)

    late = g_entry.random(n) >= spec.start_fraction
    entry = np.where(late, g_entry.integers(1, max(T - 12, 2), size=n), 0)
    entry = np.minimum(entry, T - 1)
    if spec.censor_rate > 0:
        life = g_entry.geometric(spec.censor_rate, size=n)   # months until delisting, >= 1
    else:
        life = np.full(n, T + 1)
    censor = np.minimum(entry + life - 1, T - 1)

    Z = np.empty((n, T, N_COVARIATES))
    Z[:, :, 0] = 1.0
    Z[:, :, 1:3] = macro.T[None, :, :]
    Z[:, :, 3:] = np.moveaxis(firm_cov, 0, -1)
    expo = Z @ th.kappa + th.xi * h[None, :]
    p = -np.expm1(-np.exp(expo))
    U = g_default.random((n, T))
    hit = (U < p) & (np.arange(T)[None, :] >= entry[:, None]) & (np.arange(T)[None, :] <= censor[:, None])
    first_hit = np.where(hit.any(axis=1), hit.argmax(axis=1), T)

    records = []
    width = len(str(n - 1))
    m0 = spec.first_month
    for i in range(n):
        defaulted = first_hit[i] <= censor[i]
        last = first_hit[i] if defaulted else censor[i]
        rows = Z[i, entry[i]:last + 1]
        d = np.zeros(rows.shape[0], dtype=np.int8)
        if defaulted:
            d[-1] = 1
        records.append(FirmRecord(f"F{i:0{width}d}", m0 + int(entry[i]), m0 + int(last), rows, d))
    panel = FirmPanel(records, (m0, m0 + T - 1))
    return panel, SyntheticTruth(th, FrailtyPath(m0, h), anchor)


def save_truth(truth: SyntheticTruth, spec: GeneratorSpec, path) -> None:
    doc = {
        "theta": theta_to_dict(truth.theta),
        "frailty": {"start": truth.frailty.start, "h": [float(x) for x in truth.frailty.h]},
        "h_anchor": truth.h_anchor,
        "generator": generator_to_dict(spec),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def theta_to_dict(theta: Theta) -> dict:
    return {"kappa": [float(x) for x in theta.kappa], "xi": theta.xi, "eta": theta.eta, "sigma": theta.sigma}


def theta_from_dict(d: dict) -> Theta:
    return Theta(np.array(d["kappa"], dtype=float), d["xi"], d["eta"], d["sigma"])


def generator_to_dict(spec: GeneratorSpec) -> dict:
    return {
        "n_firms": spec.n_firms, "n_months": spec.n_months, "theta": theta_to_dict(spec.theta_true),
        "macro": {k: asdict(v) for k, v in spec.macro.items()},
        "firm": {k: asdict(v) for k, v in spec.firm.items()},
        "start_fraction": spec.start_fraction, "censor_rate": spec.censor_rate,
        "first_month": spec.first_month, "h0_mode": spec.h0_mode, "seed": spec.seed,
    }


# --------------------------------------------------------------------------
# configuration


class ConfigError(ValueError):
    """Structured configuration failure; ``field`` is a dotted path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path or '<root>'}: {message}")
        self.field = field_path


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_AR1 = {"type": "object", "required": ["mean", "sd", "phi"], "additionalProperties": False,
        "properties": {"mean": _NUM, "sd": {"type": "number", "minimum": 0}, "phi": _NUM}}
_THETA = {"type": "object", "required": ["kappa", "xi", "eta", "sigma"], "additionalProperties": False,
          "properties": {"kappa": {"type": "array", "items": _NUM, "minItems": 8, "maxItems": 8},
                         "xi": _NUM, "eta": _NUM, "sigma": _NUM}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "prior": {
            "type": "object", "required": ["type"], "additionalProperties": False,
            "properties": {
                "type": {"enum": ["uniform", "gaussian"]},
                "mu": {"type": "array", "items": _NUM, "minItems": 9, "maxItems": 9},
                "sigma": {"type": "array", "minItems": 9, "maxItems": 9,
                          "items": {"type": "array", "items": _NUM, "minItems": 9, "maxItems": 9}},
                "sigma_repair": {"enum": ["none", "nearest_spd"]},
            },
        },
        "generator": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_firms": {"type": "integer", "minimum": 1}, "n_months": {"type": "integer", "minimum": 1},
                "theta": _THETA,
                "macro": {"type": "object", "additionalProperties": _AR1},
                "firm": {"type": "object", "additionalProperties": _AR1},
                "start_fraction": _NUM, "censor_rate": _NUM, "first_month": _INT,
                "h0_mode": {"enum": ["zero", "stationary"]},
            },
        },
        "smc": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_particles": {"type": "integer", "minimum": 2},
                           "resampling": {"enum": ["multinomial", "systematic"]},
                           "h0_mode": {"enum": ["zero", "stationary"]}},
        },
        "em": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_paths_per_iter": {"type": "integer", "minimum": 1},
                "burn_in": {"type": ["integer", "null"], "minimum": 0},
                "thin": {"type": "integer", "minimum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "patience": {"type": "integer", "minimum": 1},
                "fix_sigma": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "grad_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_evals": {"type": "integer", "minimum": 1},
                "last_month": {"type": ["integer", "null"]},
            },
        },
        "forecast": {
            "type": "object", "additionalProperties": False,
            "properties": {"horizon_months": {"type": "integer", "minimum": 1},
                           "n_draws": {"type": "integer", "minimum": 1},
                           "mode": {"enum": ["stochastic", "point"]},
                           "origin_month": {"type": ["integer", "null"]}},
        },
        "backtest": {
            "type": "object", "additionalProperties": False,
            "properties": {"train_end_month": {"type": ["integer", "null"]},
                           "horizons_years": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                           "models": {"type": "array",
                                      "items": {"enum": ["uniform", "gaussian", "logistic"]}}},
        },
        "report": {"type": "object", "additionalProperties": False,
                   "properties": {"figures": {"type": "boolean"}}},
        "paths": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


@dataclass
class RunConfig:
    seed: int = 0
    prior: PriorSpec = field(default_factory=UniformPrior)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    smc: SmcConfig = field(default_factory=SmcConfig)
    em: EmConfig = field(default_factory=EmConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)
    em_last_month: int | None = None   # estimate on months up to this one
    figures: bool = True
    paths: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)
    warnings: list = field(default_factory=list)

    def path(self, name: str, must_exist: bool = True) -> Path:
        if name not in self.paths:
            raise ConfigError(f"paths.{name}", "required for this command but not set")
        p = Path(self.paths[name])
        if not p.is_absolute():
            p = self.base_dir / p
        if must_exist and not p.exists():
            raise ConfigError(f"paths.{name}", f"file not found: {p}")
        return p

    def with_seed(self, seed: int) -> "RunConfig":
        from dataclasses import replace
        return replace(self, seed=seed, generator=replace(self.generator, seed=seed),
                       smc=replace(self.smc, seed=seed), em=replace(self.em, seed=seed,
                                                                    smc=replace(self.em.smc, seed=seed)))


def nearest_spd(a: np.ndarray, rel_floor: float = 1e-5) -> np.ndarray:
    """Symmetric matrix with eigenvalues raised to ``rel_floor * max eigenvalue``."""
    w, V = np.linalg.eigh(0.5 * (a + a.T))
    w = np.maximum(w, rel_floor * w.max())
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def build_prior(block: dict, warnings: list | None = None) -> PriorSpec:
    """Prior from a config block.  Asymmetric covariances are symmetrised
    with a warning; a non-SPD result is rejected unless
    ``sigma_repair == "nearest_spd"``."""
    warnings = warnings if warnings is not None else []
    if block.get("type", "uniform") == "uniform":
        return UniformPrior()
    for key in ("mu", "sigma"):
        if key not in block:
            raise ConfigError(f"prior.{key}", "required for a gaussian prior")
    mu = np.array(block["mu"], dtype=float)
    sig = np.array(block["sigma"], dtype=float)
    asym = float(np.max(np.abs(sig - sig.T)))
    if asym > 0:
        i, j = np.unravel_index(np.argmax(np.abs(sig - sig.T)), sig.shape)
        msg = (f"prior.sigma is not symmetric (largest mismatch {asym:.3g} at [{i}][{j}]); "
               "using (S + S^T) / 2")
        log.warning(msg)
        warnings.append(msg)
        sig = 0.5 * (sig + sig.T)
    try:
        return GaussianPrior(mu, sig)
    except ModelError as exc:
        if block.get("sigma_repair", "none") != "nearest_spd":
            raise ConfigError("prior.sigma", str(exc)) from None
    w = np.linalg.eigvalsh(sig)
    msg = (f"prior.sigma is not positive definite (smallest eigenvalue {w[0]:.3g}); "
           "raising eigenvalues to 1e-5 x the largest")
    log.warning(msg)
    warnings.append(msg)
    return GaussianPrior(mu, nearest_spd(sig))


def _validate(doc) -> None:
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(v.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        where = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path).lstrip(".")
        raise ConfigError(where, e.message)


@contextmanager
def _section(name: str):
    try:
        yield
    except (ValueError, TypeError, ModelError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(name, str(exc)) from None


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    _validate(doc)
    warnings: list = []
    seed = int(doc.get("seed", 0))
    with _section("prior"):
        prior = build_prior(doc.get("prior", {"type": "uniform"}), warnings)

    gdoc = doc.get("generator", {})
    gkw = {k: gdoc[k] for k in ("n_firms", "n_months", "start_fraction", "censor_rate", "first_month", "h0_mode")
           if k in gdoc}
    try:
        if "theta" in gdoc:
            gkw["theta_true"] = theta_from_dict(gdoc["theta"])
        if "macro" in gdoc:
            gkw["macro"] = {**_default_macro(), **{k: Ar1Spec(**v) for k, v in gdoc["macro"].items()}}
        if "firm" in gdoc:
            gkw["firm"] = {**_default_firm(), **{k: Ar1Spec(**v) for k, v in gdoc["firm"].items()}}
        generator = GeneratorSpec(seed=seed, **gkw)
    except (ValueError, TypeError) as exc:
        raise ConfigError("generator", str(exc)) from None

    sdoc, edoc = doc.get("smc", {}), doc.get("em", {})
    fdoc, bdoc = doc.get("forecast", {}), doc.get("backtest", {})
    with _section("smc"):
        smc = SmcConfig(n_particles=sdoc.get("n_particles", 512),
                        resampling=sdoc.get("resampling", "multinomial"),
                        seed=seed, h0_mode=sdoc.get("h0_mode", "zero"))
    with _section("em"):
        em = EmConfig(
            n_paths_per_iter=edoc.get("n_paths_per_iter", 50), smc=smc, burn_in=edoc.get("burn_in"),
            thin=edoc.get("thin", 1), max_iters=edoc.get("max_iters", 100), tol=edoc.get("tol", 1e-3),
            patience=edoc.get("patience", 3), fix_sigma=edoc.get("fix_sigma"),
            optimizer=OptimizerConfig(max_evals=edoc.get("max_evals", 200),
                                      grad_tol=edoc.get("grad_tol", 1e-6)),
            seed=seed,
        )
    with _section("forecast"):
        forecast = ForecastConfig(horizon_months=fdoc.get("horizon_months", 36),
                                  n_draws=fdoc.get("n_draws", 500), mode=fdoc.get("mode", "stochastic"),
                                  origin_month=fdoc.get("origin_month"))
    default_models = ("uniform", "logistic") if isinstance(prior, UniformPrior) else \
        ("uniform", "gaussian", "logistic")
    with _section("backtest"):
        backtest = BacktestConfig(train_end_month=bdoc.get("train_end_month"),
                                  horizons_years=tuple(bdoc.get("horizons_years", (1, 2, 3))),
                                  models=tuple(bdoc.get("models", default_models)))
    if "gaussian" in backtest.models and isinstance(prior, UniformPrior):
        raise ConfigError("backtest.models", "'gaussian' needs a gaussian prior block")
    return RunConfig(seed=seed, prior=prior, generator=generator, smc=smc, em=em, forecast=forecast,
                     backtest=backtest, em_last_month=edoc.get("last_month"),
                     figures=doc.get("report", {}).get("figures", True),
                     paths=dict(doc.get("paths", {})), base_dir=base_dir or Path.cwd(), warnings=warnings)


def load_config(path) -> RunConfig:
    """Read a JSON run configuration; every failure is a :class:`ConfigError`."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {p}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(doc, p.resolve().parent)


def default_config_text() -> str:
    return resources.files("frailcredit").joinpath("data/default_config.json").read_text()


def load_default_config() -> RunConfig:
    return parse_config(json.loads(default_config_text()))
