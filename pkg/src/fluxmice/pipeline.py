"""End-to-end analysis: diagnose, impute, select, pool, evaluate.

Every stage is a deterministic function of the config (including its seed),
so a subcommand that stops early writes exactly the artifacts a full run
would have written for those stages.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .core import (
    ColumnSpec,
    DataTable,
    TransformLedger,
    apply_transforms,
    filter_high_missing_rows,
    load_csv,
    save_csv,
    split_train_validation,
)
from .evaluate import ModelScores, auroc_report, roc_curve
from .glm import INTERCEPT, StepwiseResult, backward_stepwise, design_matrix
from .mice import (
    ImputationConfig,
    ImputedStack,
    Passive,
    convergence_trace,
    first_chains,
    impute_new_rows,
    run_chained_equations,
    save_imputations,
)
from .missing import (
    emit_fluxplot,
    influx_outflux,
    missing_patterns,
    percent_missing_by_group,
    select_imputation_predictors,
)
from .pooling import (
    SelectionTally,
    SupermodelResult,
    build_supermodel,
    pool_selected_union,
    tally_selected,
    write_pooled_csv,
)
from .synth import benchmark_scenario, generate, write_truth

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("analyze", "impute", "fit", "pool", "eval", "run")


class PipelineConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 2024
    output_dir: str = "out"
    input_path: str | None = None
    scenario: str | None = None
    scenario_options: dict = field(default_factory=dict)
    columns: list[ColumnSpec] = field(default_factory=list)
    row_filter_threshold: float = 0.6
    outflux_threshold: float = 0.9
    pinned_predictors: list[str] = field(default_factory=list)
    m: list[int] = field(default_factory=lambda: [5, 20])
    max_iter: int = 10
    pmm_donors: int = 5
    methods: dict[str, str] = field(default_factory=dict)
    stepwise_criterion: str = "aic"
    stepwise_alpha: float = 0.05
    supermodel_alpha: float = 0.05
    supermodel_test: str = "D1"
    split_fraction: float = 0.7
    n_jobs: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.columns = [c if isinstance(c, ColumnSpec) else ColumnSpec.from_dict(c) for c in self.columns]
        if isinstance(self.m, int):
            self.m = [self.m]
        if self.schema_version != SCHEMA_VERSION:
            raise PipelineConfigError(f"unsupported config schema_version {self.schema_version}")
        if (self.input_path is None) == (self.scenario is None):
            raise PipelineConfigError("config needs exactly one of input_path or scenario")
        if self.input_path is not None and not self.columns:
            raise PipelineConfigError("a CSV input needs a column schema")
        if any(k < 2 for k in self.m):
            raise PipelineConfigError("every m must be at least 2")
        if self.stepwise_criterion not in ("aic", "pvalue"):
            raise PipelineConfigError(f"unknown stepwise criterion {self.stepwise_criterion!r}")
        if self.supermodel_test not in ("D1", "D3"):
            raise PipelineConfigError(f"unknown supermodel test {self.supermodel_test!r}")
        if not 0 < self.split_fraction < 1:
            raise PipelineConfigError("split_fraction must lie in (0, 1)")
        if not 0 < self.row_filter_threshold <= 1:
            raise PipelineConfigError("row_filter_threshold must lie in (0, 1]")
        if not 0 <= self.outflux_threshold <= 1:
            raise PipelineConfigError("outflux_threshold must lie in [0, 1]")
        if self.seed < 0:
            raise PipelineConfigError("seed must be nonnegative")
        if self.columns:
            names = {c.name for c in self.columns}
            bad = (set(self.pinned_predictors) | set(self.methods)) - names
            if bad:
                raise PipelineConfigError(f"config references unknown variables {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["columns"] = [c.to_dict() for c in self.columns]
        return d

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("n_jobs")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path: str | Path) -> PipelineConfig:
    """Read a JSON pipeline config; a run manifest (with a ``config`` key) is accepted too."""
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineConfigError(f"cannot read config {path}: {exc}") from exc
    if "config" in d and isinstance(d["config"], dict):
        d = d["config"]
    try:
        return PipelineConfig(**d)
    except TypeError as exc:
        raise PipelineConfigError(f"invalid config: {exc}") from exc


# stages ----------------------------------------------------------------------


@contextmanager
def stage(name: str):
    """Tag any exception escaping the block with the stage it came from."""
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


def load_data(cfg: PipelineConfig) -> tuple[DataTable, dict | None, dict | None]:
    """Input table, generating truth and generator config (the latter two only for scenarios)."""
    if cfg.scenario is not None:
        opts = {"seed": cfg.seed, **cfg.scenario_options}
        try:
            gen, truth = benchmark_scenario(cfg.scenario, **opts)
        except KeyError as exc:
            raise PipelineConfigError(str(exc)) from exc
        _, table = generate(gen)
        if cfg.columns:
            table = DataTable(tuple(cfg.columns), table.select([c.name for c in cfg.columns]).values)
        return table, truth, gen.to_dict()
    return load_csv(cfg.input_path, cfg.columns), None, None


def prepare(table: DataTable, cfg: PipelineConfig) -> tuple[DataTable, dict]:
    """Drop rows lacking the outcome, then rows with too many missing predictors."""
    y = table.column(table.outcome)
    keep = ~np.isnan(y)
    table2 = table.take(np.flatnonzero(keep))
    filtered, report = filter_high_missing_rows(table2, cfg.row_filter_threshold)
    report = {"input_rows": table.n_rows, "missing_outcome": int((~keep).sum()), **report}
    return filtered, report


def analysis_variables(table: DataTable) -> list[str]:
    return table.columns_with_role("predictor") + [table.outcome]


@dataclass
class Analysis:
    flux: list
    patterns: object
    percent_missing: list
    imputation_predictors: set[str]


def analyze(table: DataTable, cfg: PipelineConfig, outdir: Path | None) -> Analysis:
    variables = analysis_variables(table)
    flux = influx_outflux(table, variables)
    patterns = missing_patterns(table, table.columns_with_role("predictor"))
    pct = percent_missing_by_group(table, table.outcome, table.columns_with_role("predictor"))
    chosen = select_imputation_predictors(flux, cfg.outflux_threshold, [table.outcome, *cfg.pinned_predictors])
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        patterns.to_csv(outdir / "patterns.csv")
        with (outdir / "missing_by_group.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "group", "percent_missing"])
            for var, lev, p in pct:
                w.writerow([var, lev, repr(p)])
        emit_fluxplot(flux, outdir / "fluxplot.svg")
        (outdir / "imputation_predictors.txt").write_text(
            "\n".join(v for v in variables if v in chosen) + "\n", encoding="utf-8"
        )
    return Analysis(flux, patterns, pct, chosen)


def with_transforms(table: DataTable) -> tuple[DataTable, TransformLedger]:
    ledger = TransformLedger.from_schema(table.columns)
    return apply_transforms(table, ledger), ledger


def analysis_terms(table: DataTable, ledger: TransformLedger) -> list[str]:
    return [ledger.analysis_name(n) for n in table.columns_with_role("predictor")]


def imputation_config(cfg: PipelineConfig, table: DataTable, ledger: TransformLedger,
                      predictors: set[str], m: int) -> ImputationConfig:
    methods: dict[str, object] = dict(cfg.methods)
    for source, (derived, kind) in ledger.entries.items():
        methods[derived] = Passive(kind, source)
    excluded = set(table.columns_with_role("excluded"))
    matrix = {}
    for c in table.columns:
        if c.name in excluded or isinstance(methods.get(c.name), Passive):
            continue
        matrix[c.name] = {p for p in predictors if p != c.name and p not in excluded}
    return ImputationConfig(m=m, max_iter=cfg.max_iter, predictor_matrix=matrix, method=methods,
                            pmm_donors=cfg.pmm_donors, seed=cfg.seed, n_jobs=cfg.n_jobs)


def _map(fn, items, n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class MIResult:
    m: int
    stack: ImputedStack
    stepwise: list[StepwiseResult]
    tally: SelectionTally
    supermodel: SupermodelResult | None = None
    direct: tuple | None = None
    scores: ModelScores | None = None


def stepwise_per_imputation(stack: ImputedStack, terms: Sequence[str], cfg: PipelineConfig) -> list[StepwiseResult]:
    outcome = stack.original.outcome

    def one(tab):
        X = design_matrix(tab, terms)
        return backward_stepwise(X, tab.column(outcome), cfg.stepwise_criterion, cfg.stepwise_alpha)

    return _map(one, stack.completed, cfg.n_jobs)


def _designs(stack: ImputedStack, terms: Sequence[str]):
    outcome = stack.original.outcome
    return [design_matrix(t, terms) for t in stack.completed], [t.column(outcome) for t in stack.completed]


@dataclass
class AvailableCase:
    stepwise: StepwiseResult
    n_rows: int
    scores: ModelScores | None = None


def available_case(train: DataTable, terms: Sequence[str], cfg: PipelineConfig) -> AvailableCase:
    cols = list(terms) + [train.outcome]
    cc = train.take(np.flatnonzero(train.complete_rows(cols)))
    X = design_matrix(cc, terms)
    sw = backward_stepwise(X, cc.column(train.outcome), cfg.stepwise_criterion, cfg.stepwise_alpha)
    return AvailableCase(sw, cc.n_rows)


def score_available_case(ac: AvailableCase, valid: DataTable) -> ModelScores:
    terms = [t for t in ac.stepwise.terms if t != INTERCEPT]
    rows = np.flatnonzero(valid.complete_rows(terms))
    v = valid.take(rows)
    X = design_matrix(v, terms)
    return ModelScores("available_case", ac.stepwise.fit.predict_proba(X), v.column(valid.outcome))


def score_pooled(res: MIResult, valid_completed: Sequence[DataTable]) -> ModelScores:
    sm = res.supermodel
    terms = [t for t in sm.terms if t != INTERCEPT]
    qbar = np.array([e.qbar for e in sm.pooled])
    outcome = valid_completed[0].outcome
    probs, per = [], []
    for fit, tab in zip(sm.fits, valid_completed):
        X = design_matrix(tab, terms)
        probs.append(1.0 / (1.0 + np.exp(-(X.values @ qbar))))
        per.append((fit.predict_proba(X), tab.column(outcome)))
    return ModelScores(f"mice_m{res.m}", np.mean(probs, axis=0), valid_completed[0].column(outcome), per)


@dataclass
class RunResult:
    table: DataTable
    prep_report: dict
    analysis: Analysis
    train: DataTable | None = None
    valid: DataTable | None = None
    terms: list[str] = field(default_factory=list)
    mi: dict[int, MIResult] = field(default_factory=dict)
    cc: AvailableCase | None = None
    auc: list[dict] = field(default_factory=list)
    truth: dict | None = None


def run_pipeline(cfg: PipelineConfig, until: str = "run", outdir: Path | None = None) -> RunResult:
    """Run the stages up to ``until``; write artifacts under ``outdir`` when given."""
    if until not in STAGES:
        raise PipelineConfigError(f"unknown stage {until!r}")
    level = STAGES.index(until)
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    with stage("load"):
        raw, truth, gen = load_data(cfg)
        table, report = prepare(raw, cfg)
    with stage("analyze"):
        analysis = analyze(table, cfg, None if outdir is None else outdir / "analysis")
        if outdir is not None:
            _write_json(outdir / "analysis" / "row_filter.json", report)
            if truth is not None:
                write_truth(truth, outdir / "truth.json")
    result = RunResult(table, report, analysis, truth=truth)
    if level >= STAGES.index("impute"):
        with stage("impute"):
            _impute_stage(cfg, result, outdir)
    if level >= STAGES.index("fit"):
        with stage("fit"):
            _fit_stage(cfg, result, outdir)
    if level >= STAGES.index("pool"):
        with stage("pool"):
            _pool_stage(cfg, result, outdir)
    if level >= STAGES.index("eval"):
        with stage("eval"):
            _eval_stage(result, outdir)
    if level >= STAGES.index("run") and outdir is not None:
        write_manifest(outdir, cfg, gen)
    return result


def _impute_stage(cfg: PipelineConfig, result: RunResult, outdir: Path | None) -> None:
    full, ledger = with_transforms(result.table)
    train, valid = split_train_validation(full, cfg.split_fraction, cfg.seed)
    result.train, result.valid = train, valid
    result.terms = analysis_terms(result.table, ledger)
    # chain k depends only on (seed, k): impute once at the largest m and take prefixes
    icfg = imputation_config(cfg, full, ledger, result.analysis.imputation_predictors, max(cfg.m))
    log.info("imputing m=%d", icfg.m)
    stack = run_chained_equations(train, icfg)
    for m in sorted(cfg.m):
        sub = first_chains(stack, m)
        result.mi[m] = MIResult(m, sub, [], SelectionTally({}, m))
        if outdir is not None:
            d = outdir / f"m{m}"
            save_imputations(sub, d / "imputations", prefix="train")
            if len(sub.traces):
                convergence_trace(sub, d / "traces.csv")
            if sub.notes:
                (d / "imputation_notes.txt").write_text("\n".join(sub.notes) + "\n", encoding="utf-8")


def _fit_stage(cfg: PipelineConfig, result: RunResult, outdir: Path | None) -> None:
    result.cc = available_case(result.train, result.terms, cfg)
    largest = result.mi[max(result.mi)]
    log.info("stepwise selection on %d imputations", largest.m)
    selections = stepwise_per_imputation(largest.stack, result.terms, cfg)
    for m, res in result.mi.items():
        res.stepwise = selections[:m]
        res.tally = tally_selected([s.selected for s in res.stepwise], candidates=result.terms)
    if outdir is not None:
        _write_stepwise(outdir, result)


def _pool_stage(cfg: PipelineConfig, result: RunResult, outdir: Path | None) -> None:
    for m, res in result.mi.items():
        log.info("supermodel for m=%d", m)
        Xs, ys = _designs(res.stack, result.terms)
        res.supermodel = build_supermodel(res.tally, Xs, ys, cfg.supermodel_alpha, cfg.supermodel_test)
        res.direct = pool_selected_union(res.tally, Xs, ys)
        if outdir is not None:
            d = outdir / f"m{m}"
            write_pooled_csv(res.supermodel.pooled, d / "pooled.csv")
            write_pooled_csv(res.direct[0], d / "pooled_direct.csv")
            _write_rows(d / "supermodel_tests.csv", ["term", "count", "statistic", "df1", "df2", "p", "kept"],
                        [[t["term"], t["count"], repr(t["statistic"]), t["df1"], repr(t["df2"]), repr(t["p"]),
                          int(t["kept"])] for t in res.supermodel.tests])
    if outdir is not None:
        _write_coefficients(outdir / "coefficients.csv", result)


def _eval_stage(result: RunResult, outdir: Path | None) -> None:
    valid = result.valid
    result.cc.scores = score_available_case(result.cc, valid)
    models = [result.cc.scores]
    completions = impute_new_rows(result.mi[max(result.mi)].stack, valid, exclude=[valid.outcome])
    for m, res in result.mi.items():
        res.scores = score_pooled(res, completions[:m])
        models.append(res.scores)
    if outdir is not None:
        result.auc = auroc_report(models, outdir / "roc")
    else:
        result.auc = [{"model": ms.name, "auc": roc_curve(ms.scores, ms.labels).auc} for ms in models]


# writers ---------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_stepwise(outdir: Path, result: RunResult) -> None:
    cc = result.cc
    (outdir / "available_case").mkdir(parents=True, exist_ok=True)
    cc.stepwise.fit.to_csv(outdir / "available_case" / "stepwise_model.csv")
    for m, res in result.mi.items():
        rows = []
        for k, sw in enumerate(res.stepwise, start=1):
            for term, b, se, z, p in sw.fit.summary_rows():
                rows.append([k, term, repr(b), repr(se), repr(z), repr(p)])
        _write_rows(outdir / f"m{m}" / "stepwise_models.csv", ["imputation", "term", "estimate", "se", "z", "p"], rows)
    ms = sorted(result.mi)
    rows = []
    for term in result.terms:
        rows.append([term, *(result.mi[m].tally.counts.get(term, 0) for m in ms)])
    order = sorted(range(len(rows)), key=lambda i: [-v for v in rows[i][1:]] + [rows[i][0]])
    _write_rows(outdir / "tally.csv", ["term", *(f"m{m}" for m in ms)], [rows[i] for i in order])


def _write_coefficients(path: Path, result: RunResult) -> None:
    """Side-by-side coefficient table: available-case and one block per m."""
    cc = result.cc.stepwise.fit
    cc_rows = {r[0]: r for r in cc.summary_rows()}
    pooled = {m: {e.term: e for e in res.supermodel.pooled} for m, res in result.mi.items()}
    header = ["term", "cc_beta", "cc_se", "cc_p"]
    for m in sorted(pooled):
        header += [f"m{m}_beta", f"m{m}_se", f"m{m}_p"]
    rows = []
    for term in [INTERCEPT, *result.terms]:
        row = [term]
        r = cc_rows.get(term)
        row += [repr(r[1]), repr(r[2]), repr(r[4])] if r else ["", "", ""]
        for m in sorted(pooled):
            e = pooled[m].get(term)
            row += [repr(e.qbar), repr(e.se), repr(e.p_value)] if e else ["", "", ""]
        if any(row[1:]):
            rows.append(row)
    _write_rows(path, header, rows)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(outdir: Path, cfg: PipelineConfig, generator: dict | None) -> dict:
    artifacts = {
        str(p.relative_to(outdir)): _sha256(p)
        for p in sorted(outdir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "config": json.loads(cfg.canonical_json()),
        "config_hash": cfg.config_hash,
        "generator": generator,
        "versions": {
            "fluxmice": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "artifacts": artifacts,
    }
    _write_json(outdir / "manifest.json", manifest)
    return manifest


def write_dataset(table: DataTable, path: Path) -> None:
    save_csv(table, path)
