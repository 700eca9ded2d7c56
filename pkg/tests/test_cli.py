from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from fluxmice.cli import main
from fluxmice.pipeline import PipelineConfig, PipelineConfigError, load_config


def _write_config(path: Path, **kw) -> Path:
    cfg = {"scenario": "paper_like", "scenario_options": {"n_rows": 900}, "seed": 3,
           "m": [2, 3], "max_iter": 2, "output_dir": str(path.parent / "out")}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def _read_csv(path: Path) -> list[dict]:
    with path.open() as fh:
        return list(csv.DictReader(fh))


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = _write_config(d / "cfg.json")
    assert main(["run", "--config", str(cfg), "--out", str(d / "a"), "--quiet"]) == 0
    return d, cfg


def test_run_writes_all_artifacts(full_run):
    d, _ = full_run
    out = d / "a"
    for rel in ("analysis/fluxplot.svg", "analysis/fluxplot.csv", "analysis/patterns.csv",
                "m2/imputations/train_imp1.csv", "m3/traces.csv", "m3/traces.svg",
                "m3/stepwise_models.csv", "tally.csv", "coefficients.csv", "m3/pooled.csv",
                "roc/roc_available_case.csv", "roc/roc_mice_m3.svg", "manifest.json"):
        assert (out / rel).exists(), rel
    tally = _read_csv(out / "tally.csv")
    assert list(tally[0]) == ["term", "m2", "m3"]
    models = [r["model"] for r in _read_csv(out / "roc" / "auc_summary.csv")]
    assert models == ["available_case", "mice_m2", "mice_m3"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64
    assert set(manifest["versions"]) >= {"numpy", "scipy", "python"}


def test_rerun_from_manifest_is_byte_identical_serial_and_parallel(full_run):
    d, _ = full_run
    manifest = d / "a" / "manifest.json"
    assert main(["run", "--config", str(manifest), "--out", str(d / "b"), "--quiet"]) == 0
    assert main(["run", "--config", str(manifest), "--out", str(d / "c"), "--jobs", "3", "--quiet"]) == 0
    a, b, c = _tree(d / "a"), _tree(d / "b"), _tree(d / "c")
    assert a == b == c


def test_seed_override_changes_results(full_run, tmp_path):
    _, cfg = full_run
    assert main(["impute", "--config", str(cfg), "--out", str(tmp_path), "--seed", "4", "--m", "2", "--quiet"]) == 0
    other = (tmp_path / "m2" / "imputations" / "train_imp1.csv").read_bytes()
    assert other != (full_run[0] / "a" / "m2" / "imputations" / "train_imp1.csv").read_bytes()
    assert not (tmp_path / "tally.csv").exists()


def test_analyze_complete_csv_has_one_pattern(tmp_path):
    rng = np.random.default_rng(0)
    data = tmp_path / "d.csv"
    rows = ["a,b,y"] + [f"{x:.3f},{z:.3f},{int(z > 0)}" for x, z in rng.normal(size=(30, 2))]
    data.write_text("\n".join(rows) + "\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "input_path": str(data), "output_dir": str(tmp_path / "out"),
        "columns": [{"name": "a"}, {"name": "b"}, {"name": "y", "kind": "binary", "role": "outcome"}],
    }))
    assert main(["analyze", "--config", str(cfg), "--quiet"]) == 0
    patterns = _read_csv(tmp_path / "out" / "analysis" / "patterns.csv")
    assert len(patterns) == 1 and patterns[0]["count"] == "30"
    flux = _read_csv(tmp_path / "out" / "analysis" / "fluxplot.csv")
    assert all(float(r["outflux"]) == 1.0 for r in flux)


def test_paper_like_blood_counts_sit_top_left(full_run):
    flux = {r["variable"]: r for r in _read_csv(full_run[0] / "a" / "analysis" / "fluxplot.csv")}
    for v in ("Hb", "RCC", "MCV", "RDW"):
        assert float(flux[v]["influx"]) < 0.05 and float(flux[v]["outflux"]) > 0.9
    assert float(flux["ALT"]["outflux"]) < 0.5


def test_unwritable_output_dir_is_usage_error(full_run, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["analyze", "--config", str(full_run[1]), "--out", str(blocker / "sub"), "--quiet"]) == 2


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "paper_like", "m": [1]}))
    assert main(["run", "--config", str(cfg), "--quiet"]) == 2
    cfg.write_text("{not json")
    assert main(["run", "--config", str(cfg), "--quiet"]) == 2
    assert main(["run"]) == 2


def test_config_rejects_unknown_variables():
    with pytest.raises(PipelineConfigError):
        PipelineConfig(input_path="x.csv", columns=[{"name": "a"}], pinned_predictors=["b"])


def test_stage_failure_is_named(tmp_path, caplog):
    data = tmp_path / "d.csv"
    data.write_text("a,y\n1,0\n0,1\n2,0\n3,1\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "input_path": str(data), "output_dir": str(tmp_path / "out"),
        "columns": [{"name": "a", "transform": "log"}, {"name": "y", "kind": "binary", "role": "outcome"}],
    }))
    with caplog.at_level(logging.ERROR):
        assert main(["impute", "--config", str(cfg)]) == 1
    assert "impute stage failed" in caplog.text and "DomainError" in caplog.text
    assert (tmp_path / "out" / "analysis" / "patterns.csv").exists()


def test_missing_input_file_is_runtime_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"input_path": str(tmp_path / "none.csv"), "output_dir": str(tmp_path / "o"),
                               "columns": [{"name": "y", "kind": "binary", "role": "outcome"}]}))
    assert main(["analyze", "--config", str(cfg), "--quiet"]) == 1


def test_synth_outputs(tmp_path):
    assert main(["synth", "--scenario", "mcar_small", "--out", str(tmp_path), "--quiet"]) == 0
    rows = (tmp_path / "mcar_small.csv").read_text().splitlines()
    assert len(rows) == 501
    truth = json.loads((tmp_path / "mcar_small_truth.json").read_text())
    assert truth["coefficients"] == {"x1": 0.5, "x2": 0.5}
    assert main(["synth", "--scenario", "nope", "--out", str(tmp_path), "--quiet"]) == 2


def test_load_config_accepts_manifest(full_run):
    cfg = load_config(full_run[0] / "a" / "manifest.json")
    assert cfg.seed == 3 and cfg.m == [2, 3]
