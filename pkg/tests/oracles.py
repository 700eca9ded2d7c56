"""Independent reference computations used to cross-check the library.

These are deliberately naive (explicit loops, textbook formulas) and share
no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def flux_bruteforce(observed: np.ndarray) -> list[tuple[float, float, float]]:
    """(influx, outflux, fico) per column from the pairwise definitions, r = 1 meaning observed."""
    r = np.asarray(observed, dtype=int)
    n, p = r.shape
    out = []
    total_obs = sum(r[i, b] for i in range(n) for b in range(p))
    total_mis = sum(1 - r[i, b] for i in range(n) for b in range(p))
    for a in range(p):
        num_in = 0
        num_out = 0
        for b in range(p):
            for i in range(n):
                num_in += (1 - r[i, a]) * r[i, b]
                num_out += r[i, a] * (1 - r[i, b])
        if total_mis == 0:
            influx, outflux = 0.0, 1.0
        else:
            influx = num_in / total_obs
            outflux = num_out / total_mis
        rows_obs = [i for i in range(n) if r[i, a] == 1]
        incomplete = [i for i in rows_obs if any(r[i, b] == 0 for b in range(p))]
        fico = len(incomplete) / len(rows_obs) if rows_obs else 0.0
        out.append((influx, outflux, fico))
    return out


def newton_logistic(X: np.ndarray, y: np.ndarray, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Plain Newton-Raphson on the logistic log-likelihood, from zero, until the step is negligible."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - mu)
        hess = (X * (mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(sum(yi * e - math.log1p(math.exp(e)) if e < 30 else yi * e - e for yi, e in zip(y, eta)))


def pairwise_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counted half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def chi2_sf_even(x: float, df: int) -> float:
    """Upper tail of chi-square with even df via the finite Poisson series."""
    assert df % 2 == 0
    h = x / 2.0
    return math.exp(-h) * sum(h**j / math.factorial(j) for j in range(df // 2))
