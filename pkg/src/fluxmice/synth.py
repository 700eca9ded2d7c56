"""Synthetic pathology-like data with controllable missingness.

Continuous variables are drawn jointly normal on a "recorded" scale and then
optionally mapped to a skewed raw scale (``exp10`` for lognormal markers,
``square`` for markers analysed on the square-root scale). The binary outcome
follows a logistic model over analysis-scale columns (natural log / square
root of the raw value where the schema asks for a transform).
"""

from __future__ import annotations

import json
import math
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import expit

from .core import ColumnSpec, DataTable, derived_name, forward_transform

SCENARIO_VERSION = 1
SKEWS = ("none", "exp", "exp10", "square")
MECHANISMS = ("mcar", "mar", "mnar")


class GeneratorConfigError(ValueError):
    pass


@dataclass
class ContinuousVar:
    name: str
    mean: float
    sd: float
    skew: str = "none"
    transform: str | None = None
    lower: float | None = None
    upper: float | None = None


@dataclass
class BinaryVar:
    name: str
    prevalence: float


@dataclass
class MissingRule:
    """Masks ``targets`` jointly (same rows).

    ``mcar``: each row with probability ``rate``. ``mar``: ``rate_when`` if
    ``driver > threshold`` else ``rate_otherwise``. ``mnar``: as ``mar`` but
    the condition is on the first target's own value.
    """

    targets: list[str]
    mechanism: str = "mcar"
    rate: float = 0.0
    driver: str | None = None
    rate_when: float = 0.0
    rate_otherwise: float = 0.0
    threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.targets, str):
            self.targets = [self.targets]
        if self.mechanism not in MECHANISMS:
            raise GeneratorConfigError(f"unknown mechanism {self.mechanism!r}")
        for r in (self.rate, self.rate_when, self.rate_otherwise):
            if not 0 <= r <= 1:
                raise GeneratorConfigError(f"rate {r} outside [0, 1]")
        if self.mechanism == "mar":
            if self.driver is None:
                raise GeneratorConfigError("mar rule needs a driver")
            if self.driver in self.targets:
                raise GeneratorConfigError(f"driver {self.driver} is a target of its own rule")


@dataclass
class GeneratorConfig:
    n_rows: int
    continuous: list[ContinuousVar]
    correlation: list[list[float]]
    binary: list[BinaryVar] = field(default_factory=list)
    outcome: str = "y"
    intercept: float = 0.0
    coefficients: dict[str, float] = field(default_factory=dict)
    missing: list[MissingRule] = field(default_factory=list)
    seed: int = 0
    name: str = "custom"
    version: int = SCENARIO_VERSION

    def __post_init__(self):
        self.continuous = [v if isinstance(v, ContinuousVar) else ContinuousVar(**v) for v in self.continuous]
        self.binary = [v if isinstance(v, BinaryVar) else BinaryVar(**v) for v in self.binary]
        self.missing = [r if isinstance(r, MissingRule) else MissingRule(**r) for r in self.missing]
        k = len(self.continuous)
        R = np.asarray(self.correlation, dtype=float)
        if R.shape != (k, k):
            raise GeneratorConfigError(f"correlation must be {k}x{k}")
        if not np.allclose(R, R.T):
            raise GeneratorConfigError("correlation matrix is not symmetric")
        for v in self.continuous:
            if v.skew not in SKEWS:
                raise GeneratorConfigError(f"{v.name}: unknown skew {v.skew!r}")
            if v.sd <= 0:
                raise GeneratorConfigError(f"{v.name}: sd must be positive")
        try:
            np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise GeneratorConfigError("covariance matrix is not positive definite") from None
        known = set(self.analysis_names)
        unknown = set(self.coefficients) - known
        if unknown:
            raise GeneratorConfigError(f"coefficients for unknown terms {sorted(unknown)}")

    @property
    def covariance(self) -> np.ndarray:
        sd = np.array([v.sd for v in self.continuous])
        return np.asarray(self.correlation, dtype=float) * np.outer(sd, sd)

    @property
    def analysis_names(self) -> list[str]:
        out = []
        for v in self.continuous:
            out.append(derived_name(v.name, v.transform) if v.transform in ("log", "sqrt") else v.name)
        out.extend(b.name for b in self.binary)
        return out

    def schema(self) -> list[ColumnSpec]:
        cols = [ColumnSpec(v.name, "continuous", "predictor", v.transform) for v in self.continuous]
        cols += [ColumnSpec(b.name, "binary", "predictor") for b in self.binary]
        cols.append(ColumnSpec(self.outcome, "binary", "outcome"))
        return cols

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path | None = None) -> str:
        txt = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(txt + "\n", encoding="utf-8")
        return txt

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def _skew(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "none":
        return x
    if kind == "exp":
        return np.exp(x)
    if kind == "exp10":
        return np.power(10.0, x)
    if kind == "square":
        return np.square(np.maximum(x, 0.0))
    raise GeneratorConfigError(kind)


def _analysis_columns(cfg: GeneratorConfig, raw: np.ndarray, binary: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for j, v in enumerate(cfg.continuous):
        x = raw[:, j]
        if v.transform in ("log", "sqrt"):
            out[derived_name(v.name, v.transform)] = forward_transform(v.transform, x)
        else:
            out[v.name] = x
    for j, b in enumerate(cfg.binary):
        out[b.name] = binary[:, j]
    return out


def _draw(cfg: GeneratorConfig, rng: np.random.Generator, n: int):
    mean = np.array([v.mean for v in cfg.continuous])
    L = np.linalg.cholesky(cfg.covariance)
    latent = mean + rng.standard_normal((n, len(cfg.continuous))) @ L.T
    raw = np.empty_like(latent)
    for j, v in enumerate(cfg.continuous):
        x = latent[:, j]
        if v.lower is not None or v.upper is not None:
            x = np.clip(x, v.lower, v.upper)
        raw[:, j] = _skew(v.skew, x)
    if cfg.binary:
        binary = np.column_stack([rng.random(n) < b.prevalence for b in cfg.binary]).astype(float)
    else:
        binary = np.empty((n, 0))
    cols = _analysis_columns(cfg, raw, binary)
    eta = np.full(n, 0.0)
    for term, beta in cfg.coefficients.items():
        eta += beta * cols[term]
    return raw, binary, eta


def generate_complete(cfg: GeneratorConfig) -> DataTable:
    """Draw a complete table (no missing cells) from ``cfg``; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, 0])
    raw, binary, eta = _draw(cfg, rng, cfg.n_rows)
    y = (rng.random(cfg.n_rows) < expit(cfg.intercept + eta)).astype(float)
    return DataTable(tuple(cfg.schema()), np.column_stack([raw, binary, y]))


def impose_missingness(t: DataTable, rules: list[MissingRule], seed: int) -> DataTable:
    """Apply each rule independently; conditions are evaluated on the input values."""
    values = np.array(t.values, copy=True)
    drop = np.zeros_like(values, dtype=bool)
    for k, rule in enumerate(rules):
        rng = np.random.default_rng([seed, 1, k])
        for tgt in rule.targets:
            t.index(tgt)
        if rule.mechanism == "mcar":
            p = np.full(t.n_rows, rule.rate)
        else:
            src = rule.driver if rule.mechanism == "mar" else rule.targets[0]
            d = t.column(src)
            if np.isnan(d).any():
                raise ValueError(f"missingness driver {src} has missing values")
            p = np.where(d > rule.threshold, rule.rate_when, rule.rate_otherwise)
        hit = rng.random(t.n_rows) < p
        for tgt in rule.targets:
            drop[:, t.index(tgt)] |= hit
    values[drop] = np.nan
    return t.with_values(values)


def generate(cfg: GeneratorConfig) -> tuple[DataTable, DataTable]:
    """Complete table and its copy with ``cfg.missing`` imposed."""
    full = generate_complete(cfg)
    return full, impose_missingness(full, cfg.missing, cfg.seed)


def _calibrate_intercept(cfg: GeneratorConfig, prevalence: float, n_mc: int = 200_000) -> float:
    """Intercept giving the requested outcome prevalence, solved on a fixed Monte Carlo sample."""
    _, _, lp = _draw(cfg, np.random.default_rng([987_654_321, 0]), n_mc)
    return float(optimize.brentq(lambda b0: expit(b0 + lp).mean() - prevalence, -60.0, 60.0, xtol=1e-12))


# Paper-like scenario ---------------------------------------------------------

# name, recorded-scale mean, sd, raw skew, analysis transform
_PAPER_VARS = [
    ("Age", 44.72, 19.36, "none", None),
    ("ALB", 42.84, 5.80, "none", None),
    ("Sodium", 139.63, 3.22, "none", None),
    ("K", 4.00, 0.45, "none", None),
    ("RCC", 4.53, 0.64, "none", None),
    ("RDW", 13.88, 1.78, "none", None),
    ("ALT", 1.46, 0.38, "exp10", "log"),
    ("ALKP", 1.92, 0.21, "exp10", "log"),
    ("Crea", 1.93, 0.16, "exp10", "log"),
    ("GGT", 1.61, 0.44, "exp10", "log"),
    ("Urea", 0.72, 0.20, "exp10", "log"),
    ("Plt", 2.39, 0.20, "exp10", "log"),
    ("WCC", 0.87, 0.17, "exp10", "log"),
    ("TBil", 1.03, 0.30, "exp10", "log"),
    ("Mono", 0.74, 0.20, "square", "sqrt"),
    ("Eos", 0.38, 0.18, "square", "sqrt"),
    ("Bas", 0.18, 0.09, "square", "sqrt"),
    ("Lymph", 1.38, 0.34, "square", "sqrt"),
    # not tabulated in the source summary table; typical adult values
    ("Hb", 140.0, 16.0, "none", None),
    ("MCV", 90.0, 6.0, "none", None),
    ("Hct", 0.42, 0.045, "none", None),
    ("Mch", 30.0, 2.2, "none", None),
    ("MCHC", 333.0, 10.0, "none", None),
    ("Neut", 2.0, 0.45, "square", "sqrt"),
]

_PAPER_CORR = {
    ("Hb", "RCC"): 0.75, ("Hb", "Hct"): 0.8, ("RCC", "Hct"): 0.75,
    ("MCV", "Mch"): 0.8, ("Mch", "MCHC"): 0.4, ("MCV", "MCHC"): 0.1,
    ("RCC", "MCV"): -0.1, ("RCC", "Mch"): -0.1, ("RDW", "MCV"): -0.3, ("RDW", "Hb"): -0.3,
    ("WCC", "Neut"): 0.7, ("WCC", "Lymph"): 0.3, ("WCC", "Mono"): 0.4,
    ("WCC", "Eos"): 0.2, ("WCC", "Bas"): 0.2, ("Neut", "Mono"): 0.2,
    ("ALT", "GGT"): 0.5, ("ALT", "ALKP"): 0.2, ("GGT", "ALKP"): 0.4, ("ALT", "TBil"): 0.2,
    ("ALB", "Hb"): 0.3, ("ALB", "ALT"): -0.1,
    ("Urea", "Crea"): 0.6, ("Sodium", "K"): 0.1, ("Urea", "K"): 0.2,
    ("Age", "Urea"): 0.3, ("Age", "Crea"): 0.2, ("Age", "ALB"): -0.3, ("Age", "RDW"): 0.2,
    ("Plt", "WCC"): 0.2,
}

# strong effects, each about 0.6 or more log-odds per SD (analysis scale)
PAPER_PLANTED = {
    "Age": -0.035,
    "Sex": -1.2,
    "log_ALT": 1.0,
    "RDW": 0.35,
    "sqrt_Lymph": 1.8,
    "log_TBil": -0.9,
}
# weaker background effects
PAPER_BACKGROUND = {
    "ALB": -0.03,
    "log_Urea": -0.5,
    "Hb": 0.012,
}

_LIVER = ["ALB", "ALT", "ALKP", "GGT", "TBil"]
_RENAL = ["Sodium", "K", "Crea", "Urea"]


@lru_cache(maxsize=1)
def _paper_intercept() -> float:
    cfg, _ = _paper_like(n_rows=10, seed=0, calibrate=False)
    return round(_calibrate_intercept(cfg, 672 / 10774), 6)


def _paper_like(n_rows: int = 4000, seed: int = 20240501, calibrate: bool = True) -> tuple[GeneratorConfig, dict]:
    names = [v[0] for v in _PAPER_VARS]
    R = np.eye(len(names))
    for (a, b), r in _PAPER_CORR.items():
        i, j = names.index(a), names.index(b)
        R[i, j] = R[j, i] = r
    cont = [
        ContinuousVar(n, m, s, skew, tr, lower=15.0 if n == "Age" else None, upper=100.0 if n == "Age" else None)
        for n, m, s, skew, tr in _PAPER_VARS
    ]
    out = "hepout"
    rules = [
        # chemistry panels absent together; much rarer for positives
        MissingRule(_LIVER + _RENAL, "mar", driver=out, rate_when=0.03, rate_otherwise=0.12),
        MissingRule(_RENAL, "mar", driver=out, rate_when=0.105, rate_otherwise=0.075),
        MissingRule(_LIVER, "mar", driver=out, rate_when=0.015, rate_otherwise=0.075),
        MissingRule(["Bas"], "mcar", rate=0.025),
        MissingRule(["Eos"], "mcar", rate=0.019),
        MissingRule(["Plt"], "mcar", rate=0.008),
        MissingRule(["Mono", "Neut", "Lymph"], "mcar", rate=0.005),
        MissingRule(["WCC"], "mcar", rate=0.005),
        MissingRule(["Hb", "RCC", "Hct", "MCV", "Mch", "MCHC", "RDW"], "mcar", rate=0.002),
    ]
    coefs = {**PAPER_PLANTED, **PAPER_BACKGROUND}
    cfg = GeneratorConfig(
        n_rows=n_rows, continuous=cont, correlation=R.tolist(), binary=[BinaryVar("Sex", 0.5136)],
        outcome=out, intercept=0.0, coefficients=coefs, missing=rules, seed=seed, name="paper_like",
    )
    if calibrate:
        cfg.intercept = _paper_intercept()
    truth = {
        "intercept": cfg.intercept,
        "coefficients": coefs,
        "planted": sorted(PAPER_PLANTED),
        "background": sorted(PAPER_BACKGROUND),
        "prevalence_target": 672 / 10774,
    }
    return cfg, truth


def _bivariate(name: str, n_rows: int = 500, seed: int = 1) -> tuple[GeneratorConfig, dict]:
    cont = [ContinuousVar("x1", 0.0, 1.0), ContinuousVar("x2", 0.0, 1.0)]
    R = [[1.0, 0.8], [0.8, 1.0]]
    if name == "mcar_small":
        cfg = GeneratorConfig(n_rows=n_rows, continuous=cont, correlation=R, outcome="y", intercept=-0.5,
                              coefficients={"x1": 0.5, "x2": 0.5},
                              missing=[MissingRule(["x2"], "mcar", rate=0.2)], seed=seed, name=name)
    else:
        # positives lose x2 at 10%, negatives at ~27%: about 20% overall at this prevalence
        cfg = GeneratorConfig(n_rows=n_rows, continuous=cont, correlation=R, outcome="y", intercept=-0.5,
                              coefficients={"x1": 0.5, "x2": 0.5},
                              missing=[MissingRule(["x2"], "mar", driver="y", rate_when=0.10, rate_otherwise=0.27)],
                              seed=seed, name=name)
    truth = {"intercept": cfg.intercept, "coefficients": dict(cfg.coefficients),
             "planted": sorted(cfg.coefficients), "background": [],
             "means": {"x1": 0.0, "x2": 0.0}, "rho": 0.8}
    return cfg, truth


SCENARIOS = ("paper_like", "mcar_small", "mar_bivariate")


def benchmark_scenario(name: str, **overrides) -> tuple[GeneratorConfig, dict]:
    """Frozen scenario config plus its generating truth.

    ``overrides`` (``n_rows``, ``seed``) rebuild the scenario at another size or
    seed with all other settings unchanged.
    """
    if name == "paper_like":
        return _paper_like(**overrides)
    if name in ("mcar_small", "mar_bivariate"):
        return _bivariate(name, **overrides)
    raise KeyError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def write_truth(truth: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def positive_rate(t: DataTable) -> float:
    y = t.column(t.outcome)
    return float(np.nanmean(y))


def binomial_band(p: float, n: int, z: float = 3.0) -> float:
    return z * math.sqrt(p * (1 - p) / n)
