"""Logistic regression by iteratively reweighted least squares.

Also provides the Wald and likelihood-ratio tests and backward stepwise
selection used in the per-imputation analysis step.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaincc

from .core import DataTable

log = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"


class RankError(ValueError):
    def __init__(self, term: str):
        super().__init__(f"design matrix is rank deficient: term {term!r} is aliased with earlier terms")
        self.term = term


class NumericError(ArithmeticError):
    pass


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution via the regularized incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    term_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.term_names):
            raise ValueError("design values do not match term names")
        if np.isnan(v).any():
            raise ValueError("design matrix has missing cells")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "term_names", tuple(self.term_names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def subset(self, terms: Sequence[str]) -> "DesignMatrix":
        keep = set(terms)
        idx = [j for j, t in enumerate(self.term_names) if t in keep]
        if len(idx) != len(keep):
            unknown = keep - set(self.term_names)
            raise KeyError(f"unknown terms {sorted(unknown)}")
        return DesignMatrix(self.values[:, idx], tuple(self.term_names[j] for j in idx))

    def drop(self, term: str) -> "DesignMatrix":
        return self.subset([t for t in self.term_names if t != term])


def design_matrix(table: DataTable, terms: Sequence[str], intercept: bool = True) -> DesignMatrix:
    """Build a dense design matrix; categorical columns are one-hot coded against their lowest level."""
    cols, names = [], []
    if intercept:
        cols.append(np.ones(table.n_rows))
        names.append(INTERCEPT)
    for term in terms:
        x = table.column(term)
        if table.spec(term).kind == "categorical":
            levels = np.unique(x[~np.isnan(x)])
            for lev in levels[1:]:
                cols.append((x == lev).astype(float))
                names.append(f"{term}[{lev:g}]")
        else:
            cols.append(np.asarray(x, dtype=float))
            names.append(term)
    values = np.column_stack(cols) if cols else np.empty((table.n_rows, 0))
    return DesignMatrix(values, tuple(names))


@dataclass
class GlmFit:
    terms: tuple[str, ...]
    coefficients: np.ndarray
    covariance: np.ndarray
    deviance: float
    n_obs: int
    n_iter: int
    converged: bool
    deviance_path: list[float] = field(default_factory=list, repr=False)

    @property
    def aic(self) -> float:
        return self.deviance + 2.0 * len(self.terms)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def z(self) -> np.ndarray:
        return self.coefficients / self.se

    @property
    def pvalues(self) -> np.ndarray:
        return np.array([chi2_sf(z * z, 1) for z in self.z])

    def index(self, term: str) -> int:
        return self.terms.index(term)

    def coef(self, term: str) -> float:
        return float(self.coefficients[self.index(term)])

    def linear_predictor(self, X: DesignMatrix) -> np.ndarray:
        Xs = X.subset(self.terms) if X.term_names != self.terms else X
        if Xs.term_names != self.terms:
            order = [Xs.term_names.index(t) for t in self.terms]
            return Xs.values[:, order] @ self.coefficients
        return Xs.values @ self.coefficients

    def predict_proba(self, X: DesignMatrix) -> np.ndarray:
        return expit(self.linear_predictor(X))

    def summary_rows(self) -> list[tuple[str, float, float, float, float]]:
        return [
            (t, float(b), float(s), float(z), float(p))
            for t, b, s, z, p in zip(self.terms, self.coefficients, self.se, self.z, self.pvalues)
        ]

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["term", "estimate", "se", "z", "p"])
            for row in self.summary_rows():
                w.writerow([row[0], *(repr(v) for v in row[1:])])


def _deviance(eta: np.ndarray, y: np.ndarray) -> float:
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def score_vector(X: DesignMatrix, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Gradient of the log-likelihood, X'(y - mu)."""
    return X.values.T @ (np.asarray(y, dtype=float) - expit(X.values @ beta))


def log_likelihood(X: DesignMatrix, y: np.ndarray, beta: np.ndarray) -> float:
    return -0.5 * _deviance(X.values @ beta, np.asarray(y, dtype=float))


def check_rank(X: DesignMatrix, tol: float = 1e-9) -> None:
    """Raise :class:`RankError` naming the first column that lies in the span of the earlier ones."""
    if X.p == 0:
        return
    r = linalg.qr(X.values, mode="r", check_finite=False)[0]
    norms = np.linalg.norm(X.values, axis=0)
    diag = np.abs(np.diag(r)[: X.p])
    for j in range(X.p):
        if norms[j] == 0 or diag[j] <= tol * norms[j]:
            raise RankError(X.term_names[j])


def fit_logistic_irls(
    X: DesignMatrix,
    y: np.ndarray,
    start: np.ndarray | None = None,
    max_iter: int = 50,
    score_tol: float = 1e-8,
    dev_tol: float = 1e-10,
    max_halvings: int = 10,
    check: bool = True,
) -> GlmFit:
    """Maximum-likelihood logistic regression via Newton-Raphson (IRLS) with step-halving.

    Stops when the largest absolute score component drops below ``score_tol``
    or the relative deviance change below ``dev_tol``. Hitting ``max_iter`` or
    saturated fitted probabilities (separation) yields ``converged=False``
    rather than an exception. ``check=False`` skips the rank check, for
    callers refitting column subsets of an already-checked design.
    """
    y = np.asarray(y, dtype=float)
    n, p = X.values.shape
    if y.shape != (n,):
        raise ValueError("y length does not match design rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be binary 0/1")
    if n <= p:
        raise ValueError(f"need more rows than terms (n={n}, p={p})")
    if check:
        check_rank(X)
    A = X.values
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    eta = A @ beta
    dev = _deviance(eta, y)
    path = [dev]
    converged = False
    it = 0
    info = None
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        w = mu * (1.0 - mu)
        score = A.T @ (y - mu)
        info = A.T @ (A * w[:, None])
        if np.max(np.abs(score)) < score_tol:
            converged = True
            it -= 1
            break
        try:
            step = linalg.solve(info, score, assume_a="pos", check_finite=False)
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        info = None
        new_beta = beta + step
        new_eta = A @ new_beta
        new_dev = _deviance(new_eta, y)
        halvings = 0
        while not new_dev <= dev + 1e-12 * abs(dev) and halvings < max_halvings:
            step = step / 2.0
            new_beta = beta + step
            new_eta = A @ new_beta
            new_dev = _deviance(new_eta, y)
            halvings += 1
        if not new_dev <= dev + 1e-12 * abs(dev):
            break
        rel = abs(dev - new_dev) / (abs(new_dev) + 0.1)
        beta, eta, dev = new_beta, new_eta, new_dev
        path.append(dev)
        if rel < dev_tol:
            converged = True
            # one more full Newton step: the deviance test can fire a step early
            mu = expit(eta)
            info = A.T @ (A * (mu * (1.0 - mu))[:, None])
            try:
                polish = beta + linalg.solve(info, A.T @ (y - mu), assume_a="pos", check_finite=False)
            except (linalg.LinAlgError, ValueError):
                break
            polish_eta = A @ polish
            polish_dev = _deviance(polish_eta, y)
            if polish_dev <= dev:
                beta, eta, dev = polish, polish_eta, polish_dev
                info = None
            break
    mu = expit(eta)
    if info is None:
        w = mu * (1.0 - mu)
        info = A.T @ (A * w[:, None])
    saturated = bool(np.any(np.abs(eta) > 30.0)) and (not converged or np.max(np.abs(A.T @ (y - mu))) > 1e-6)
    if saturated or np.any(np.abs(eta) > 36.0):
        converged = False
    try:
        cov = linalg.inv(info, check_finite=False)
    except linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    cov = (cov + cov.T) / 2.0
    return GlmFit(
        terms=X.term_names,
        coefficients=beta,
        covariance=cov,
        deviance=dev,
        n_obs=n,
        n_iter=it,
        converged=converged,
        deviance_path=path,
    )


def wald_test(fit: GlmFit, terms: Sequence[str]) -> tuple[float, int, float]:
    """Joint Wald chi-square test that the coefficients of ``terms`` are all zero."""
    idx = [fit.index(t) for t in terms]
    b = fit.coefficients[idx]
    V = fit.covariance[np.ix_(idx, idx)]
    try:
        stat = float(b @ linalg.solve(V, b, assume_a="sym"))
    except linalg.LinAlgError as exc:
        raise NumericError(f"singular covariance block for {list(terms)}") from exc
    if not np.isfinite(stat):
        raise NumericError(f"singular covariance block for {list(terms)}")
    return stat, len(idx), chi2_sf(stat, len(idx))


def likelihood_ratio_test(full: GlmFit, reduced: GlmFit) -> tuple[float, int, float]:
    """Deviance-difference test of ``reduced`` (nested) against ``full``."""
    if full.n_obs != reduced.n_obs:
        raise ValueError(f"models fitted on different data (n={full.n_obs} vs {reduced.n_obs})")
    if not set(reduced.terms) <= set(full.terms):
        raise ValueError("reduced model terms are not a subset of the full model terms")
    df = len(full.terms) - len(reduced.terms)
    stat = reduced.deviance - full.deviance
    if stat < 0:
        if stat < -1e-6 * max(1.0, abs(full.deviance)):
            warnings.warn(f"negative likelihood-ratio statistic {stat:.3g} clamped to 0", RuntimeWarning)
        stat = 0.0
    return stat, df, chi2_sf(stat, df) if df > 0 else 1.0


@dataclass
class StepwiseResult:
    fit: GlmFit
    terms: tuple[str, ...]
    dropped: list[str]

    @property
    def selected(self) -> tuple[str, ...]:
        """Selected non-intercept terms."""
        return tuple(t for t in self.terms if t != INTERCEPT)


def _start_without(fit: GlmFit, term: str) -> np.ndarray:
    j = fit.index(term)
    return np.delete(fit.coefficients, j)


def backward_stepwise(
    X: DesignMatrix,
    y: np.ndarray,
    criterion: str = "aic",
    alpha: float = 0.05,
    keep: Sequence[str] = (INTERCEPT,),
) -> StepwiseResult:
    """Backward elimination from the full model.

    ``criterion="aic"`` drops, one at a time, the term whose removal lowers
    AIC the most, until no removal lowers it. ``criterion="pvalue"`` drops the
    term with the largest Wald p-value while that p-value exceeds ``alpha``.
    Ties go to the earlier term.
    """
    if criterion not in ("aic", "pvalue"):
        raise ValueError(f"unknown criterion {criterion!r}")
    current = X
    fit = fit_logistic_irls(current, y)
    dropped: list[str] = []
    while True:
        removable = [t for t in current.term_names if t not in keep]
        if not removable:
            break
        if criterion == "aic":
            best = None
            for t in removable:
                cand = fit_logistic_irls(current.drop(t), y, start=_start_without(fit, t), check=False)
                if best is None or cand.aic < best[1].aic:
                    best = (t, cand)
            if best is not None and best[1].aic < fit.aic:
                dropped.append(best[0])
                current = current.drop(best[0])
                fit = best[1]
            else:
                break
        else:
            pv = dict(zip(fit.terms, fit.pvalues))
            worst = None
            for t in removable:
                if worst is None or pv[t] > pv[worst]:
                    worst = t
            if worst is not None and pv[worst] > alpha:
                dropped.append(worst)
                start = _start_without(fit, worst)
                current = current.drop(worst)
                fit = fit_logistic_irls(current, y, start=start, check=False)
            else:
                break
    return StepwiseResult(fit=fit, terms=current.term_names, dropped=dropped)
