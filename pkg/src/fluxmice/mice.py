"""Multiple imputation by chained equations.

Each of the ``m`` chains owns a random stream derived from ``(seed, chain)``,
so chains may run serially or concurrently with identical results.
"""

from __future__ import annotations

import csv
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from .core import DataTable, forward_transform, save_csv
from .glm import DesignMatrix, RankError, fit_logistic_irls
from .svg import PALETTE, Canvas

log = logging.getLogger(__name__)

ACTIVE_METHODS = ("pmm", "bayes_linear", "logistic")


class ImputationError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class Passive(NamedTuple):
    transform: str
    source: str


def parse_method(value) -> str | Passive:
    """Accept ``"pmm"``, ``"bayes_linear"``, ``"logistic"``, ``"passive:log:ALT"`` or a Passive."""
    if isinstance(value, Passive):
        return value
    if isinstance(value, (list, tuple)) and len(value) == 3 and value[0] == "passive":
        return Passive(value[1], value[2])
    if isinstance(value, str):
        if value in ACTIVE_METHODS:
            return value
        parts = value.split(":")
        if len(parts) == 3 and parts[0] == "passive":
            return Passive(parts[1], parts[2])
    raise ConfigError(f"unknown imputation method {value!r}")


def method_to_str(method) -> str:
    return f"passive:{method.transform}:{method.source}" if isinstance(method, Passive) else method


@dataclass
class ImputationConfig:
    m: int = 5
    max_iter: int = 10
    predictor_matrix: dict[str, set[str]] = field(default_factory=dict)
    method: dict[str, object] = field(default_factory=dict)
    pmm_donors: int = 5
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError("m must be at least 2")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.pmm_donors < 1:
            raise ConfigError("pmm_donors must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        self.method = {k: parse_method(v) for k, v in self.method.items()}
        self.predictor_matrix = {k: set(v) for k, v in self.predictor_matrix.items()}
        for var, preds in self.predictor_matrix.items():
            if var in preds:
                raise ConfigError(f"variable {var} cannot predict itself")

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "max_iter": self.max_iter,
            "pmm_donors": self.pmm_donors,
            "seed": self.seed,
            "method": {k: method_to_str(v) for k, v in sorted(self.method.items())},
            "predictor_matrix": {k: sorted(v) for k, v in sorted(self.predictor_matrix.items())},
        }


@dataclass(frozen=True)
class TraceRecord:
    chain: int
    iteration: int
    variable: str
    mean: float
    sd: float


@dataclass
class ConvergenceTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, variable: str, chain: int, stat: str = "mean") -> np.ndarray:
        return np.array(
            [getattr(r, stat) for r in self.records if r.variable == variable and r.chain == chain]
        )

    @property
    def variables(self) -> list[str]:
        return list(dict.fromkeys(r.variable for r in self.records))


@dataclass
class ImputedStack:
    original: DataTable
    completed: list[DataTable]
    traces: ConvergenceTrace
    config: ImputationConfig
    notes: list[str] = field(default_factory=list)
    visit_order: list[str] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.completed)


def _xy_design(values: np.ndarray, cols: Sequence[int]) -> np.ndarray:
    return np.column_stack([np.ones(values.shape[0]), values[:, list(cols)]]) if cols else np.ones((values.shape[0], 1))


def _gram(X: np.ndarray, notes: list | None, label: str) -> tuple[np.ndarray, bool]:
    xtx = X.T @ X
    p = xtx.shape[0]
    ev = np.linalg.eigvalsh(xtx)
    if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
        ridge = 1e-5 * np.trace(xtx) / p
        if notes is not None:
            notes.append(f"{label}: ridge fallback ({ridge:.3g}) on near-singular normal equations")
        return xtx + ridge * np.eye(p), True
    return xtx, False


def _bayes_fit(y_obs, X_obs, rng, notes, label):
    n1, p = X_obs.shape
    if n1 <= p + 2:
        raise ImputationError(f"{label}: {n1} observed values for {p} coefficients; need more than {p + 2}")
    xtx, _ = _gram(X_obs, notes, label)
    chol = linalg.cho_factor(xtx, lower=True)
    beta_hat = linalg.cho_solve(chol, X_obs.T @ y_obs)
    resid = y_obs - X_obs @ beta_hat
    sigma2 = float(resid @ resid) / rng.chisquare(n1 - p)
    V = linalg.cho_solve(chol, np.eye(p))
    L = np.linalg.cholesky((V + V.T) / 2.0)
    beta_dot = beta_hat + np.sqrt(sigma2) * (L @ rng.standard_normal(p))
    return beta_hat, beta_dot, sigma2


def _split(y: np.ndarray, X: np.ndarray):
    obs = ~np.isnan(y)
    if np.isnan(X).any():
        raise ImputationError("predictor matrix contains missing values")
    return obs, y[obs], X[obs], X[~obs]


def impute_bayes_linear(y: np.ndarray, X: np.ndarray, rng: np.random.Generator,
                        notes: list | None = None, label: str = "") -> np.ndarray:
    """Draws for the missing entries of ``y`` from the Bayesian linear regression posterior.

    ``X`` is the complete design for all rows (intercept included by caller).
    """
    obs, y_obs, X_obs, X_mis = _split(y, X)
    _, beta_dot, sigma2 = _bayes_fit(y_obs, X_obs, rng, notes, label)
    return X_mis @ beta_dot + rng.standard_normal(X_mis.shape[0]) * np.sqrt(sigma2)


def _nearest_donors(pred_obs: np.ndarray, pred_mis: np.ndarray, donors: int) -> np.ndarray:
    """(n_mis, donors) indices into ``pred_obs`` of the closest predictions."""
    n_obs = pred_obs.size
    order = np.argsort(pred_obs, kind="stable")
    sorted_pred = pred_obs[order]
    width = min(2 * donors, n_obs)
    pos = np.searchsorted(sorted_pred, pred_mis)
    start = np.clip(pos - donors, 0, n_obs - width)
    window = start[:, None] + np.arange(width)[None, :]
    dist = np.abs(sorted_pred[window] - pred_mis[:, None])
    pick = np.argsort(dist, axis=1, kind="stable")[:, :donors]
    return order[np.take_along_axis(window, pick, axis=1)]


def impute_pmm(y: np.ndarray, X: np.ndarray, donors: int, rng: np.random.Generator,
               notes: list | None = None, label: str = "") -> np.ndarray:
    """Predictive mean matching (type-1 matching).

    Observed rows are scored with the least-squares coefficients, missing rows
    with a posterior draw; each missing row takes the observed ``y`` of a
    donor chosen uniformly from the ``donors`` nearest predictions.
    """
    obs, y_obs, X_obs, X_mis = _split(y, X)
    if donors < 1 or donors > y_obs.size:
        raise ImputationError(f"{label}: donors={donors} must lie in [1, {y_obs.size}]")
    beta_hat, beta_dot, _ = _bayes_fit(y_obs, X_obs, rng, notes, label)
    cand = _nearest_donors(X_obs @ beta_hat, X_mis @ beta_dot, donors)
    choice = rng.integers(0, donors, size=X_mis.shape[0])
    return y_obs[cand[np.arange(X_mis.shape[0]), choice]]


def impute_logistic(y: np.ndarray, X: np.ndarray, rng: np.random.Generator,
                    notes: list | None = None, label: str = "") -> np.ndarray:
    """Bernoulli draws for missing binary ``y`` from a logistic model with drawn coefficients.

    Falls back to the observed class frequency if the fit fails to converge.
    """
    obs, y_obs, X_obs, X_mis = _split(y, X)
    if not (np.any(y_obs == 1) and np.any(y_obs == 0)):
        raise ImputationError(f"{label}: both classes must be observed for logistic imputation")
    names = tuple(f"x{j}" for j in range(X_obs.shape[1]))
    try:
        fit = fit_logistic_irls(DesignMatrix(X_obs, names), y_obs)
        ok = fit.converged
    except (RankError, ValueError):
        ok = False
    if ok:
        try:
            L = np.linalg.cholesky(fit.covariance)
        except np.linalg.LinAlgError:
            ok = False
    if not ok:
        if notes is not None:
            notes.append(f"{label}: logistic fit failed; drawing from observed class frequency")
        p = np.full(X_mis.shape[0], y_obs.mean())
    else:
        beta_dot = fit.coefficients + L @ rng.standard_normal(fit.coefficients.size)
        p = expit(X_mis @ beta_dot)
    return (rng.random(X_mis.shape[0]) < p).astype(float)


class _Plan:
    """Resolved per-variable plan shared by all chains."""

    def __init__(self, t: DataTable, cfg: ImputationConfig, exclude: Sequence[str] = ()):
        self.names = t.names
        miss_counts = (~t.mask).sum(axis=0)
        self.methods: dict[str, object] = {}
        for c in t.columns:
            meth = cfg.method.get(c.name)
            if meth is None:
                meth = "logistic" if c.kind == "binary" else "pmm"
            self.methods[c.name] = meth
        passive = {n for n, mth in self.methods.items() if isinstance(mth, Passive)}
        for n in passive:
            src = self.methods[n].source
            if src not in self.names:
                raise ConfigError(f"passive variable {n} refers to unknown source {src}")
            if isinstance(self.methods[src], Passive):
                raise ConfigError(f"passive variable {n} has passive source {src}")
        excluded_role = {c.name for c in t.columns if c.role == "excluded"}
        self.active = [
            n for j, n in enumerate(self.names)
            if miss_counts[j] > 0 and n not in passive and n not in excluded_role
        ]
        self.active.sort(key=lambda n: (miss_counts[t.index(n)], t.index(n)))
        self.passive_of: dict[str, list[tuple[int, str, int]]] = {}
        for n in self.names:
            mth = self.methods[n]
            if isinstance(mth, Passive):
                self.passive_of.setdefault(mth.source, []).append((t.index(n), mth.transform, t.index(mth.source)))
        self.predictors: dict[str, list[int]] = {}
        for n in self.active:
            if n in cfg.predictor_matrix:
                preds = cfg.predictor_matrix[n]
                unknown = set(preds) - set(self.names)
                if unknown:
                    raise ConfigError(f"predictor matrix for {n} references unknown variables {sorted(unknown)}")
            else:
                preds = {m for m in self.names if m != n and m not in passive and m not in excluded_role}
            preds = set(preds) - set(exclude) - {n}
            cols = sorted(t.index(p) for p in preds)
            for j in cols:
                nm = self.names[j]
                mth = self.methods[nm]
                if isinstance(mth, Passive) and mth.source == n:
                    raise ConfigError(f"{nm} is derived from {n} and cannot predict it")
            self.predictors[n] = cols
        self.categorical = {t.index(c.name) for c in t.columns if c.kind == "categorical"}
        self.levels = {j: np.unique(t.values[~np.isnan(t.values[:, j]), j]) for j in self.categorical}

    def design(self, values: np.ndarray, var: str) -> np.ndarray:
        cols = [np.ones(values.shape[0])]
        for j in self.predictors[var]:
            if j in self.categorical:
                for lev in self.levels[j][1:]:
                    cols.append((values[:, j] == lev).astype(float))
            else:
                cols.append(values[:, j])
        return np.column_stack(cols)


def _refresh_passive(values: np.ndarray, plan: _Plan, source: str, rows=None) -> None:
    for j, kind, src in plan.passive_of.get(source, ()):
        if rows is None:
            values[:, j] = forward_transform(kind, values[:, src])
        else:
            values[rows, j] = forward_transform(kind, values[rows, src])


def chain_rng(seed: int, chain: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, chain, stream])


def initialize_imputations(t: DataTable, cfg: ImputationConfig, plan: _Plan | None = None) -> list[np.ndarray]:
    """Starting values per chain: each missing cell gets a uniform draw from its variable's observed values."""
    plan = plan or _Plan(t, cfg)
    states = []
    for k in range(cfg.m):
        states.append(_initial_state(t, plan, chain_rng(cfg.seed, k)))
    return states


def _initial_state(t: DataTable, plan: _Plan, rng) -> np.ndarray:
    values = np.array(t.values, copy=True)
    for n in plan.active:
        j = t.index(n)
        miss = np.isnan(values[:, j])
        obs = values[~miss, j]
        if obs.size == 0:
            raise ImputationError(f"variable {n} has no observed values to initialize from")
        values[miss, j] = rng.choice(obs, size=int(miss.sum()))
    for src in plan.passive_of:
        _refresh_passive(values, plan, src)
    return values


def _impute_one(plan, cfg, values, var, j, y, miss, rng, notes, label):
    X = plan.design(values, var)
    mth = plan.methods[var]
    if mth == "pmm":
        donors = min(cfg.pmm_donors, int((~miss).sum()))
        return impute_pmm(y, X, donors, rng, notes, label)
    if mth == "bayes_linear":
        return impute_bayes_linear(y, X, rng, notes, label)
    if mth == "logistic":
        return impute_logistic(y, X, rng, notes, label)
    raise ConfigError(f"variable {var}: method {mth!r} cannot be imputed actively")


def _run_chain(t: DataTable, cfg: ImputationConfig, plan: _Plan, k: int):
    rng = chain_rng(cfg.seed, k)
    values = _initial_state(t, plan, rng)
    notes: list[str] = []
    records = []
    miss_masks = {n: np.isnan(t.column(n)) for n in plan.active}
    for it in range(1, cfg.max_iter + 1):
        for var in plan.active:
            j = t.index(var)
            miss = miss_masks[var]
            y = np.where(miss, np.nan, values[:, j])
            label = f"chain {k + 1}, iteration {it}, variable {var}"
            try:
                draws = _impute_one(plan, cfg, values, var, j, y, miss, rng, notes, label)
            except (ImputationError, ConfigError, np.linalg.LinAlgError, linalg.LinAlgError) as exc:
                raise ImputationError(f"{label}: {exc}") from exc
            values[miss, j] = draws
            _refresh_passive(values, plan, var, rows=miss)
            sd = float(draws.std(ddof=1)) if draws.size > 1 else 0.0
            records.append(TraceRecord(k + 1, it, var, float(draws.mean()), sd))
    return values, records, notes


def run_chained_equations(t: DataTable, cfg: ImputationConfig) -> ImputedStack:
    """Impute ``t`` ``cfg.m`` times; observed cells are copied through unchanged."""
    plan = _Plan(t, cfg)
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as ex:
            results = list(ex.map(lambda k: _run_chain(t, cfg, plan, k), range(cfg.m)))
    else:
        results = [_run_chain(t, cfg, plan, k) for k in range(cfg.m)]
    obs = t.mask
    completed, records, notes = [], [], []
    for values, recs, nts in results:
        values[obs] = t.values[obs]
        completed.append(t.with_values(values))
        records.extend(recs)
        notes.extend(nts)
    return ImputedStack(t, completed, ConvergenceTrace(records), cfg, notes, list(plan.active))


def first_chains(stack: ImputedStack, m: int) -> ImputedStack:
    """The stack restricted to its first ``m`` chains.

    Chain streams depend only on the seed and chain index, so this equals a
    fresh run with ``m`` imputations and the same seed.
    """
    if not 1 <= m <= stack.m:
        raise ValueError(f"cannot take {m} of {stack.m} chains")
    keep = re.compile(r"^chain (\d+),")
    notes = [n for n in stack.notes if (g := keep.match(n)) is None or int(g.group(1)) <= m]
    traces = ConvergenceTrace([r for r in stack.traces.records if r.chain <= m])
    cfg = replace(stack.config, m=m)
    return ImputedStack(stack.original, stack.completed[:m], traces, cfg, notes, list(stack.visit_order))


def impute_new_rows(stack: ImputedStack, new: DataTable, exclude: Sequence[str] = (),
                    max_iter: int | None = None) -> list[DataTable]:
    """Complete ``new`` once per chain using models fitted on that chain's completed training data.

    Training completions stay fixed; only the new rows are updated across
    sweeps. Variables in ``exclude`` (typically the outcome) are never used
    as predictors, so the new rows' outcome cannot leak into their imputations.
    """
    cfg = stack.config
    if new.names != stack.original.names:
        raise ConfigError("new table columns differ from the imputed table")
    plan = _Plan(new, cfg, exclude=exclude)
    train_plan = _Plan(stack.original, cfg, exclude=exclude)
    plan.levels = train_plan.levels
    n_iter = cfg.max_iter if max_iter is None else max_iter
    out = []
    for k, train in enumerate(stack.completed):
        rng = chain_rng(cfg.seed, k, 1)
        tv = train.values
        values = np.array(new.values, copy=True)
        for n in plan.active:
            j = new.index(n)
            miss = np.isnan(values[:, j])
            pool = stack.original.column(n)
            pool = pool[~np.isnan(pool)]
            values[miss, j] = rng.choice(pool, size=int(miss.sum()))
        for src in plan.passive_of:
            _refresh_passive(values, plan, src)
        for it in range(n_iter):
            for var in plan.active:
                if var in exclude:
                    continue
                j = new.index(var)
                miss = np.isnan(new.column(var))
                train_y = stack.original.column(var)
                # stack training rows (observed y only) above the new rows needing imputation
                stacked = np.vstack([tv, values[miss]])
                y = np.concatenate([train_y, np.full(int(miss.sum()), np.nan)])
                label = f"new rows, chain {k + 1}, variable {var}"
                try:
                    draws = _impute_one(plan, cfg, stacked, var, j, y, np.isnan(y), rng, None, label)
                except (ImputationError, np.linalg.LinAlgError, linalg.LinAlgError) as exc:
                    raise ImputationError(f"{label}: {exc}") from exc
                # draws cover training rows missing y too; keep only the new rows
                values[miss, j] = draws[np.isnan(train_y).sum():]
                _refresh_passive(values, plan, var, rows=miss)
        values[new.mask] = new.values[new.mask]
        out.append(new.with_values(values))
    return out


def save_imputations(stack: ImputedStack, outdir: str | Path, prefix: str = "data") -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, tab in enumerate(stack.completed, start=1):
        p = outdir / f"{prefix}_imp{k}.csv"
        save_csv(tab, p)
        paths.append(p)
    return paths


def convergence_trace(stack: ImputedStack, path: str | Path) -> None:
    """Write trace CSV (chain,iteration,variable,mean,sd) and an SVG of per-variable trace lines."""
    trace = stack.traces
    if not len(trace):
        raise ValueError("no traces recorded (nothing was imputed)")
    path = Path(path)
    with path.with_suffix(".csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", "variable", "mean", "sd"])
        for r in trace.records:
            w.writerow([r.chain, r.iteration, r.variable, repr(r.mean), repr(r.sd)])
    write_trace_svg(trace, path.with_suffix(".svg"))


def write_trace_svg(trace: ConvergenceTrace, path: Path) -> None:
    variables = trace.variables
    chains = sorted({r.chain for r in trace.records})
    n_iter = max(r.iteration for r in trace.records)
    # one panel per variable stacked vertically, each normalized to its own range
    panels = []
    for var in variables:
        c = Canvas((1.0, float(max(n_iter, 2))), _range(trace, var), title=f"{var}: mean of imputed values",
                   xlabel="Iteration", ylabel="mean")
        for i, ch in enumerate(chains):
            ys = trace.series(var, ch)
            c.line(np.arange(1, ys.size + 1), ys, color=PALETTE[i % len(PALETTE)])
        panels.append(c.render())
    height = 480 * len(panels)
    inner = "\n".join(
        f'<g transform="translate(0,{480 * i})">{p.split(">", 1)[1].rsplit("</svg>", 1)[0]}</g>'
        for i, p in enumerate(panels)
    )
    path.write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="640" height="{height}" '
        f'viewBox="0 0 640 {height}">\n{inner}\n</svg>\n',
        encoding="utf-8",
    )


def _range(trace: ConvergenceTrace, var: str) -> tuple[float, float]:
    vals = [r.mean for r in trace.records if r.variable == var]
    lo, hi = min(vals), max(vals)
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    return lo - pad, hi + pad
