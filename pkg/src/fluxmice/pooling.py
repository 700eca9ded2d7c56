"""Combining analyses of multiply imputed datasets.

Scalar pooling uses Rubin's rules; multi-parameter tests use the D1 (pooled
Wald) statistic of Li, Raghunathan & Rubin (1991) or the D3 (pooled
likelihood-ratio) statistic of Meng & Rubin (1992).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, stats

from .glm import INTERCEPT, DesignMatrix, GlmFit, _deviance, fit_logistic_irls

DF_CAP = 1e6


@dataclass(frozen=True)
class PooledEstimate:
    term: str
    qbar: float
    W: float
    B: float
    T: float
    df: float
    fmi: float
    p_value: float
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.T)

    @property
    def t(self) -> float:
        return self.qbar / self.se if self.T > 0 else 0.0

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        q = stats.t.ppf(0.5 + level / 2.0, self.df)
        return self.qbar - q * self.se, self.qbar + q * self.se


def rubin_df(W: float, B: float, m: int, dfcom: float | None = None) -> float:
    """Rubin (1987) degrees of freedom; with ``dfcom`` the Barnard-Rubin (1999) small-sample form."""
    T = W + (1.0 + 1.0 / m) * B
    # (m - 1)(1 + 1/r)^2 written as (m - 1)/lambda^2 so tiny B cannot overflow
    lam = (1.0 + 1.0 / m) * B / T if T > 0 and B > 0 else 0.0
    df = DF_CAP if lam < 1e-150 else min((m - 1) / lam**2, DF_CAP)
    if dfcom is not None:
        obs = (dfcom + 1.0) / (dfcom + 3.0) * dfcom * (1.0 - lam)
        df = 1.0 / (1.0 / df + 1.0 / obs)
    return df


def pool_scalar(term: str, estimates: Sequence[float], variances: Sequence[float], dfcom: float | None = None) -> PooledEstimate:
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.size
    if m < 2 or u.size != m:
        raise ValueError("need at least two imputations with matching estimates and variances")
    qbar = float(q.mean())
    W = float(u.mean())
    B = float(q.var(ddof=1))
    T = W + (1.0 + 1.0 / m) * B
    df = rubin_df(W, B, m, dfcom)
    fmi = (1.0 + 1.0 / m) * B / T if T > 0 else 0.0
    if T > 0:
        p = float(2.0 * stats.t.sf(abs(qbar) / math.sqrt(T), df))
    else:
        p = 1.0 if qbar == 0 else 0.0
    return PooledEstimate(term, qbar, W, B, T, df, fmi, min(p, 1.0), m)


def pool_rubin(
    terms: Sequence[str], betas: np.ndarray, ses: np.ndarray, dfcom: float | None = None
) -> list[PooledEstimate]:
    """Pool ``m`` rows of per-imputation estimates (``betas``) and standard errors (``ses``)."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    ses = np.atleast_2d(np.asarray(ses, dtype=float))
    if betas.shape != ses.shape or betas.shape[1] != len(terms):
        raise ValueError("estimate/SE arrays do not match the term list")
    return [pool_scalar(t, betas[:, j], ses[:, j] ** 2, dfcom) for j, t in enumerate(terms)]


def pool_fits(fits: Sequence[GlmFit], dfcom: float | None = None) -> list[PooledEstimate]:
    terms = fits[0].terms
    for f in fits[1:]:
        if f.terms != terms:
            raise ValueError(f"term sets differ across imputations: {terms} vs {f.terms}")
    return pool_rubin(terms, np.array([f.coefficients for f in fits]), np.array([f.se for f in fits]), dfcom)


def write_pooled_csv(pooled: Iterable[PooledEstimate], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "qbar", "se_total", "df", "fmi", "p"])
        for e in pooled:
            w.writerow([e.term, repr(e.qbar), repr(e.se), repr(e.df), repr(e.fmi), repr(e.p_value)])


@dataclass(frozen=True)
class MultiTest:
    """Pooled multi-parameter test result; ``r`` is the relative increase in variance."""

    statistic: float
    df1: int
    df2: float
    p_value: float
    r: float
    qbar: np.ndarray = field(repr=False)
    ubar: np.ndarray = field(repr=False)
    between: np.ndarray = field(repr=False)


def _denominator_df(k: int, m: int, r: float) -> float:
    if r <= 0:
        return math.inf
    t = k * (m - 1)
    if r < 1e-100:
        return math.inf
    if t > 4:
        return 4.0 + (t - 4.0) * (1.0 + (1.0 - 2.0 / t) / r) ** 2
    return t * (1.0 + 1.0 / k) * (1.0 + 1.0 / r) ** 2 / 2.0


def _f_sf(stat: float, k: int, nu: float) -> float:
    if stat <= 0:
        return 1.0
    if not math.isfinite(nu) or nu > 1e12:
        return float(stats.chi2.sf(stat * k, k))
    return float(stats.f.sf(stat, k, nu))


def pooled_wald_D1(betas: np.ndarray, covs: np.ndarray) -> MultiTest:
    """D1 test that a k-vector of coefficients is zero.

    ``betas`` is (m, k) and ``covs`` (m, k, k): the tested sub-vector and its
    covariance block from each imputation.
    """
    Q = np.asarray(betas, dtype=float)
    U = np.asarray(covs, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
        U = U.reshape(-1, 1, 1)
    m, k = Q.shape
    if m < 2:
        raise ValueError("need at least two imputations")
    qbar = Q.mean(axis=0)
    ubar = U.mean(axis=0)
    dev = Q - qbar
    B = dev.T @ dev / (m - 1)
    try:
        ubar_inv_b = linalg.solve(ubar, B, assume_a="sym")
        ubar_inv_q = linalg.solve(ubar, qbar, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise ArithmeticError("singular mean within-imputation covariance") from exc
    r = float((1.0 + 1.0 / m) * np.trace(ubar_inv_b) / k)
    stat = float(qbar @ ubar_inv_q / (k * (1.0 + r)))
    nu = _denominator_df(k, m, r)
    return MultiTest(stat, k, nu, _f_sf(stat, k, nu), r, qbar, ubar, B)


def pooled_wald_from_fits(fits: Sequence[GlmFit], terms: Sequence[str]) -> MultiTest:
    idx = [fits[0].index(t) for t in terms]
    betas = np.array([f.coefficients[idx] for f in fits])
    covs = np.array([f.covariance[np.ix_(idx, idx)] for f in fits])
    return pooled_wald_D1(betas, covs)


def pooled_lrt_D3(
    full_fits: Sequence[GlmFit],
    reduced_fits: Sequence[GlmFit],
    designs: Sequence[DesignMatrix],
    ys: Sequence[np.ndarray],
) -> MultiTest:
    """D3 pooled likelihood-ratio test of nested logistic models across imputations."""
    m = len(full_fits)
    if not (len(reduced_fits) == len(designs) == len(ys) == m) or m < 2:
        raise ValueError("need matching full/reduced fits, designs and outcomes for m >= 2 imputations")
    k = len(full_fits[0].terms) - len(reduced_fits[0].terms)
    if k <= 0:
        raise ValueError("reduced model must have fewer terms")
    qf = np.mean([f.coefficients for f in full_fits], axis=0)
    qr = np.mean([f.coefficients for f in reduced_fits], axis=0)
    d_own = np.mean([r.deviance - f.deviance for f, r in zip(full_fits, reduced_fits)])
    d_fixed = []
    for X, y in zip(designs, ys):
        Xf = X.subset(full_fits[0].terms).values
        Xr = X.subset(reduced_fits[0].terms).values
        d_fixed.append(_deviance(Xr @ qr, y) - _deviance(Xf @ qf, y))
    d_fixed = float(np.mean(d_fixed))
    r = max(0.0, (m + 1.0) / (k * (m - 1.0)) * (d_own - d_fixed))
    stat = max(0.0, d_fixed / (k * (1.0 + r)))
    nu = _denominator_df(k, m, r)
    return MultiTest(stat, k, nu, _f_sf(stat, k, nu), r, qf, np.empty((0, 0)), np.empty((0, 0)))


@dataclass
class SelectionTally:
    counts: dict[str, int]
    m: int

    def __post_init__(self):
        for t, c in self.counts.items():
            if not 0 <= c <= self.m:
                raise ValueError(f"count {c} for {t} outside [0, {self.m}]")

    def ordered(self) -> list[tuple[str, int]]:
        """Terms by descending count, ties by name."""
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))

    def unanimous(self) -> list[str]:
        return [t for t, c in self.ordered() if c == self.m]


def tally_selected(models: Sequence[Iterable[str]], candidates: Iterable[str] = ()) -> SelectionTally:
    """Occurrence count of each term across per-imputation selected models."""
    if len(models) < 1:
        raise ValueError("need at least one model")
    c: Counter[str] = Counter()
    for terms in models:
        c.update(set(terms) - {INTERCEPT})
    counts = {t: 0 for t in candidates if t != INTERCEPT}
    counts.update(c)
    return SelectionTally(counts, len(models))


@dataclass
class SupermodelResult:
    terms: tuple[str, ...]
    pooled: list[PooledEstimate]
    fits: list[GlmFit]
    tests: list[dict]


def _fit_all(designs, ys, terms, starts=None):
    fits = []
    for k, (X, y) in enumerate(zip(designs, ys)):
        fits.append(fit_logistic_irls(X.subset(terms), y, start=None if starts is None else starts[k]))
    return fits


def build_supermodel(
    tally: SelectionTally,
    designs: Sequence[DesignMatrix],
    ys: Sequence[np.ndarray],
    alpha: float = 0.05,
    test: str = "D1",
    dfcom: float | None = None,
) -> SupermodelResult:
    """Impute-then-select final model.

    Terms chosen in every imputation form the core. Each remaining term with
    a nonzero count, in descending-count order, is added to the current model
    in every imputation and kept when its pooled test gives ``p < alpha``.
    The final model is refitted on all imputations and pooled by Rubin's rules.
    """
    if test not in ("D1", "D3"):
        raise ValueError(f"unknown pooled test {test!r}")
    if len(designs) != tally.m or len(ys) != tally.m:
        raise ValueError(f"tally counts {tally.m} imputations but {len(designs)} datasets given")
    order = [t for t in designs[0].term_names if t == INTERCEPT]
    core = order + tally.unanimous()
    current = list(core)
    current_fits = _fit_all(designs, ys, current)
    tests = []
    for term, count in tally.ordered():
        if count == tally.m or count == 0:
            continue
        cand_terms = current + [term]
        cand_fits = _fit_all(designs, ys, cand_terms)
        if test == "D1":
            res = pooled_wald_from_fits(cand_fits, [term])
        else:
            res = pooled_lrt_D3(cand_fits, current_fits, designs, ys)
        kept = res.p_value < alpha
        tests.append({"term": term, "count": count, "statistic": res.statistic, "df1": res.df1,
                      "df2": res.df2, "p": res.p_value, "kept": kept})
        if kept:
            current = cand_terms
            current_fits = cand_fits
    ordered = [t for t in designs[0].term_names if t in set(current)]
    fits = _fit_all(designs, ys, ordered)
    return SupermodelResult(tuple(ordered), pool_fits(fits, dfcom), fits, tests)


def pool_selected_union(
    tally: SelectionTally, designs: Sequence[DesignMatrix], ys: Sequence[np.ndarray], dfcom: float | None = None
) -> tuple[list[PooledEstimate], list[GlmFit]]:
    """Direct pooling: refit every term selected at least once in all imputations and pool."""
    selected = {t for t, c in tally.counts.items() if c > 0}
    terms = [t for t in designs[0].term_names if t == INTERCEPT or t in selected]
    fits = _fit_all(designs, ys, terms)
    return pool_fits(fits, dfcom), fits
