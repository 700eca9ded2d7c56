"""Missing-data pattern statistics: patterns, influx/outflux, FICO.

Flux coefficients follow van Buuren's definitions with ``r = 1`` meaning
observed, so a complete variable has influx 0 and outflux 1.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DataTable
from .svg import Canvas


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class PatternTable:
    variables: tuple[str, ...]
    patterns: tuple[tuple[tuple[int, ...], int], ...]

    @property
    def n_patterns(self) -> int:
        return len(self.patterns)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["count", *self.variables, "n_missing"])
            for vec, count in self.patterns:
                w.writerow([count, *vec, len(vec) - sum(vec)])


@dataclass(frozen=True)
class FluxRecord:
    variable: str
    prop_observed: float
    influx: float
    outflux: float
    fico: float


def missing_patterns(t: DataTable, variables: Sequence[str] | None = None) -> PatternTable:
    """Distinct observed/missing row patterns, most frequent first (ties by pattern)."""
    names = list(variables) if variables is not None else t.names
    mask = t.mask[:, [t.index(n) for n in names]].astype(int)
    counts = Counter(tuple(int(v) for v in row) for row in mask)
    # ties: patterns with more observed cells first, then lexicographic descending
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], -sum(kv[0]), tuple(-v for v in kv[0])))
    return PatternTable(tuple(names), tuple(ordered))


def percent_missing_by_group(t: DataTable, group: str, variables: Sequence[str] | None = None) -> list[tuple[str, int, float]]:
    """Rows of ``(variable, group level, percent missing)``."""
    g = t.column(group)
    if np.isnan(g).any():
        raise ValueError(f"group column {group} has missing values")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError(f"group column {group} must be binary")
    names = list(variables) if variables is not None else [n for n in t.names if n != group]
    out = []
    for name in names:
        miss = np.isnan(t.column(name))
        for level in (0, 1):
            rows = g == level
            n = int(rows.sum())
            pct = 100.0 * miss[rows].sum() / n if n else float("nan")
            out.append((name, level, float(pct)))
    return out


def influx_outflux(t: DataTable, variables: Sequence[str] | None = None) -> list[FluxRecord]:
    """Influx, outflux and FICO for each variable.

    With ``R`` the n x p observed indicator and ``M = 1 - R``:
    influx_a = sum_i M[i,a] * (#observed in row i) / (#observed cells),
    outflux_a = sum_i R[i,a] * (#missing in row i) / (#missing cells).
    The a == b pair terms vanish so the row sums may include them.
    """
    names = list(variables) if variables is not None else t.names
    r = t.mask[:, [t.index(n) for n in names]].astype(float)
    if r.size == 0:
        raise ValueError("table has no cells")
    miss = 1.0 - r
    obs_per_row = r.sum(axis=1)
    miss_per_row = miss.sum(axis=1)
    total_obs = obs_per_row.sum()
    total_miss = miss_per_row.sum()
    if total_obs == 0:
        raise ValueError("table has no observed cells")
    incomplete = miss_per_row > 0
    out = []
    for a, name in enumerate(names):
        influx = float(miss[:, a] @ obs_per_row / total_obs)
        if total_miss == 0:
            influx, outflux = 0.0, 1.0
        else:
            outflux = float(r[:, a] @ miss_per_row / total_miss)
        n_obs_a = r[:, a].sum()
        fico = float((r[:, a] * incomplete).sum() / n_obs_a) if n_obs_a else 0.0
        out.append(FluxRecord(name, float(r[:, a].mean()), influx, outflux, fico))
    return out


def select_imputation_predictors(
    flux: Iterable[FluxRecord], threshold: float, always: Iterable[str] = ()
) -> set[str]:
    """Variables with outflux strictly above ``threshold``, plus ``always`` (outcome, pinned)."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    chosen = {f.variable for f in flux if f.outflux > threshold}
    chosen |= set(always)
    if not chosen:
        raise SelectionError(f"no variable has outflux above {threshold} and none is pinned")
    return chosen


def write_flux_csv(flux: Sequence[FluxRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "influx", "outflux", "prop_observed", "fico"])
        for f in flux:
            w.writerow([f.variable, repr(f.influx), repr(f.outflux), repr(f.prop_observed), repr(f.fico)])


def emit_fluxplot(flux: Sequence[FluxRecord], path: str | Path) -> None:
    """Write the influx/outflux scatter as SVG and its coordinates as a sibling CSV."""
    path = Path(path)
    c = Canvas((0.0, 1.0), (0.0, 1.0), title="Outflux vs influx", xlabel="Influx", ylabel="Outflux")
    c.line([0.0, 1.0], [1.0, 0.0], color="#888", dash=True, width=1.0)
    for f in flux:
        c.point(f.influx, f.outflux, label=f.variable)
    c.save(path)
    write_flux_csv(flux, path.with_suffix(".csv"))
