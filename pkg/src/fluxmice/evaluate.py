"""ROC/AUC and the group-comparison tests used for descriptive tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.stats import rankdata

from .svg import PALETTE, Canvas


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _check_labels(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise ValueError("both classes must be present to build a ROC curve")
    return y


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC over the distinct score cutpoints (descending); tied scores form one diagonal step.

    The AUC is the trapezoidal area, accumulated in integer arithmetic so it
    equals the Mann-Whitney concordance exactly.
    """
    s = np.asarray(scores, dtype=float)
    y = _check_labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last].astype(np.int64)
    fp = (last + 1 - tp).astype(np.int64)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    n1, n0 = int(tp[-1]), int(fp[-1])
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n1 * n0)
    return RocCurve(np.r_[np.inf, s[last]], fp / n0, tp / n1, auc)


def mann_whitney_u(x: Sequence[float], y: Sequence[float], continuity: bool = True) -> tuple[float, float]:
    """U statistic for ``x`` (wins over ``y`` plus half-ties) and two-sided normal-approximation p.

    The variance uses the tie correction; a continuity correction of 0.5 is
    applied toward the mean.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")
    ranks = rankdata(np.concatenate([x, y]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    ties = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - ties / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return u, 1.0
    diff = abs(u - n1 * n2 / 2.0)
    if continuity:
        diff = max(diff - 0.5, 0.0)
    z = diff / math.sqrt(var)
    return u, float(min(1.0, 2.0 * stats.norm.sf(z)))


def concordance(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney U / (n1 n0) for positives over negatives, in exact integer arithmetic."""
    s = np.asarray(scores, dtype=float)
    y = _check_labels(labels)
    pos, neg = s[y], s[~y]
    # count on doubled scale: 2 per win, 1 per tie
    neg_sorted = np.sort(neg)
    lo = np.searchsorted(neg_sorted, pos, side="left")
    hi = np.searchsorted(neg_sorted, pos, side="right")
    twice_u = int(np.sum(2 * lo + (hi - lo)))
    return twice_u / (2 * pos.size * neg.size)


def chi_square_test(table, correction: bool = False) -> tuple[float, float]:
    """Pearson chi-square test of independence for a 2x2 table (optional Yates correction)."""
    O = np.asarray(table, dtype=float)
    if O.shape != (2, 2):
        raise ValueError("expected a 2x2 table")
    if (O < 0).any():
        raise ValueError("counts must be nonnegative")
    rows, cols, n = O.sum(axis=1), O.sum(axis=0), O.sum()
    if (rows == 0).any() or (cols == 0).any():
        raise ValueError("table has a zero margin")
    E = np.outer(rows, cols) / n
    d = np.abs(O - E)
    if correction:
        d = np.maximum(d - 0.5, 0.0)
    stat = float(np.sum(d * d / E))
    return stat, float(stats.chi2.sf(stat, 1))


AD_LEVELS = (0.15, 0.10, 0.05, 0.025, 0.01)
AD_CRITICAL = (0.576, 0.656, 0.787, 0.918, 1.092)


@dataclass(frozen=True)
class AndersonDarling:
    statistic: float
    adjusted: float
    p_band: str

    def rejects(self, level: float = 0.05) -> bool:
        return self.adjusted > AD_CRITICAL[AD_LEVELS.index(level)]


def anderson_darling_normality(x: Sequence[float]) -> AndersonDarling:
    """Anderson-Darling normality test with mean and variance estimated (Stephens' case 3).

    ``adjusted`` is A^2 (1 + 0.75/n + 2.25/n^2), compared with the case-3
    critical values; the p-value is reported as a band.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n < 8:
        raise ValueError("need at least 8 observations")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ValueError("sample has zero variance")
    z = (x - x.mean()) / sd
    logcdf = stats.norm.logcdf(z)
    logsf = stats.norm.logsf(z)
    i = np.arange(1, n + 1)
    a2 = float(-n - np.sum((2 * i - 1) * (logcdf + logsf[::-1])) / n)
    adj = a2 * (1.0 + 0.75 / n + 2.25 / n**2)
    band = "p > 0.15"
    for lev, crit in zip(AD_LEVELS, AD_CRITICAL):
        if adj > crit:
            band = f"p < {lev:g}"
    return AndersonDarling(a2, adj, band)


def format_auc(mean: float, sd: float | None = None) -> str:
    """``0.7213, 0.0031`` -> ``72% (SD 0.003)``."""
    txt = f"{100 * mean:.0f}%"
    if sd is not None and math.isfinite(sd):
        txt += f" (SD {sd:.3f})"
    return txt


@dataclass
class ModelScores:
    """Validation scores for one model.

    ``scores`` is the main per-row score vector; for pooled models it is the
    mean predicted probability over imputations, and ``per_imputation`` holds
    the ``(scores, labels)`` pairs behind the reported AUC spread.
    """

    name: str
    scores: np.ndarray
    labels: np.ndarray
    per_imputation: list[tuple[np.ndarray, np.ndarray]] | None = None


def write_roc(curve: RocCurve, path: str | Path, title: str = "") -> None:
    path = Path(path)
    with path.with_suffix(".csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
    c = Canvas((0.0, 1.0), (0.0, 1.0), title=title or f"ROC (AUC {curve.auc:.3f})",
               xlabel="False positive rate", ylabel="True positive rate")
    c.line([0.0, 1.0], [0.0, 1.0], color="#888", dash=True, width=1.0)
    c.line(curve.fpr, curve.tpr, color=PALETTE[0])
    c.save(path.with_suffix(".svg"))


def auroc_report(models: Sequence[ModelScores], outdir: str | Path) -> list[dict]:
    """Write one ROC CSV/SVG per model and ``auc_summary.csv``; return the summary rows."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ms in models:
        curve = roc_curve(ms.scores, ms.labels)
        write_roc(curve, outdir / f"roc_{ms.name}", title=f"{ms.name} (AUC {curve.auc:.3f})")
        if ms.per_imputation:
            aucs = np.array([roc_curve(s, l).auc for s, l in ms.per_imputation])
            mean, sd = float(aucs.mean()), float(aucs.std(ddof=1)) if aucs.size > 1 else float("nan")
        else:
            mean, sd = curve.auc, float("nan")
        rows.append({"model": ms.name, "auc": curve.auc, "auc_sd": sd, "auc_mean": mean,
                     "n": int(ms.labels.size), "label": format_auc(mean, sd)})
    with (outdir / "auc_summary.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "auc", "auc_sd", "auc_mean", "n", "label"])
        for r in rows:
            w.writerow([r["model"], repr(r["auc"]), repr(r["auc_sd"]), repr(r["auc_mean"]), r["n"], r["label"]])
    return rows
