import dataclasses
import json
import os
import shutil

import pytest

from mmfuse import report
from mmfuse.cli import main
from mmfuse.config import ExperimentConfig, dumps_config, load_config
from mmfuse.metrics import EvalRow
from mmfuse.trainer import RunRecord


@pytest.fixture()
def small_cfg_file(tmp_path):
    cfg = ExperimentConfig(epochs=1, eval_resamples=100, tasks=["tissue", "staining"])
    cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, n_cases=150))
    p = tmp_path / "small.json"
    p.write_text(dumps_config(cfg))
    return str(p)


@pytest.fixture()
def prepared(tmp_path, small_cfg_file):
    out = str(tmp_path / "out")
    assert main(["synth", "--config", small_cfg_file, "--out", out, "--quiet"]) == 0
    assert main(["split", "--config", small_cfg_file, "--out", out, "--quiet"]) == 0
    return small_cfg_file, out


def _rec(cell, points=None, fp="f"):
    rows = [EvalRow("test", cell, t, m, v, v, v, 100, "") for (t, m), v in (points or {}).items()]
    return RunRecord(cell, "h", eval_rows=rows, test_fingerprint=fp)


def test_relative_delta_convention():
    assert report.relative_delta(0.81, 0.60) == pytest.approx(0.35)


def test_comparison_pairs():
    assert report.comparison_pairs(["SS", "MM"]) == [("MM", "SS")]
    assert report.comparison_pairs(["SS", "MM", "MM-text", "MM-patch/cbp"]) == [
        ("MM", "SS"), ("MM-text", "MM"), ("MM-patch/cbp", "SS")]


def test_comparison_rows_one_per_task():
    a = _rec("SS", {("tissue", "auc_roc"): 0.6, ("tissue", "auc_pr"): 0.2,
                      ("staining", "auc_roc"): 0.8, ("staining", "auc_pr"): 0.5})
    b = _rec("MM", {("tissue", "auc_roc"): 0.81, ("tissue", "auc_pr"): 0.3,
                      ("staining", "auc_roc"): 0.8, ("staining", "auc_pr"): 0.5})
    rows = report.comparison_rows([a, b])
    assert [r["task"] for r in rows] == ["tissue", "staining"]
    assert rows[0]["delta_roc"] == pytest.approx(0.35) and rows[0]["delta_pr"] == pytest.approx(0.5)


def test_pairing_check():
    report.check_pairing([_rec("SS"), _rec("MM")])
    with pytest.raises(report.PairingError):
        report.check_pairing([_rec("SS"), _rec("MM", fp="g")])


def test_svg_deterministic(tmp_path):
    recs = [_rec("SS", {("tissue", "auc_roc"): 0.6}), _rec("MM", {("tissue", "auc_roc"): 0.8})]
    report.bar_chart_svg(recs, tmp_path / "a.svg")
    report.bar_chart_svg(recs, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert b"<svg" in (tmp_path / "a.svg").read_bytes()


def test_print_defaults_is_loadable(tmp_path, capsys):
    assert main(["config", "print-defaults"]) == 0
    p = tmp_path / "d.json"
    p.write_text(capsys.readouterr().out)
    assert load_config(p) == ExperimentConfig()


def test_synth_default_case_count_and_seed(tmp_path, small_cfg_file, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["synth", "--config", small_cfg_file, "--out", a, "--seed", "7"]) == 0
    assert "FFPE" in capsys.readouterr().out
    assert main(["synth", "--config", small_cfg_file, "--out", b, "--seed", "7", "--quiet"]) == 0
    ma, mb = open(os.path.join(a, "manifest.jsonl"), "rb").read(), open(os.path.join(b, "manifest.jsonl"), "rb").read()
    assert ma == mb
    cases = {json.loads(line)["case_id"] for line in ma.decode().splitlines()}
    assert len(cases) == 150


def test_seed_env_fallback(tmp_path, small_cfg_file, monkeypatch):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    main(["synth", "--config", small_cfg_file, "--out", a, "--seed", "3", "--quiet"])
    monkeypatch.setenv("MMFUSE_SEED", "3")
    main(["synth", "--config", small_cfg_file, "--out", b, "--quiet"])
    assert open(os.path.join(a, "manifest.jsonl")).read() == open(os.path.join(b, "manifest.jsonl")).read()
    monkeypatch.setenv("MMFUSE_SEED", "x")
    assert main(["synth", "--config", small_cfg_file, "--out", b, "--quiet"]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    p = tmp_path / "neg.json"
    p.write_text(json.dumps({"synth": {"imbalance_exponent": -0.5}}))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "imbalance_exponent" in capsys.readouterr().err


def test_missing_split_exit_3(tmp_path, small_cfg_file):
    out = str(tmp_path / "o")
    main(["synth", "--config", small_cfg_file, "--out", out, "--quiet"])
    assert main(["matrix", "--config", small_cfg_file, "--out", out, "--cells", "SS", "--quiet"]) == 3


def test_out_dir_created(tmp_path, small_cfg_file):
    out = tmp_path / "deep" / "er"
    assert main(["synth", "--config", small_cfg_file, "--out", str(out), "--quiet"]) == 0
    assert (out / "manifest.jsonl").exists()


def test_matrix_and_report(prepared, tmp_path):
    cfg, out = prepared
    assert main(["matrix", "--config", cfg, "--out", out, "--cells", "SS,MM", "--ablate", "text",
                 "--quiet"]) == 0
    for f in ("eval_report.csv", "comparison.csv", "auc_roc.svg"):
        assert os.path.exists(os.path.join(out, f))
    lines = open(os.path.join(out, "comparison.csv")).read().splitlines()
    assert lines[0].startswith("cell_a,cell_b,task")
    # cells fix their own task set, so both pairs cover all four tasks
    assert [l.split(",")[:2] for l in lines[1::4]] == [["MM", "SS"], ["MM-text", "MM"]]
    assert len(lines) == 1 + 2 * 4

    cells = os.path.join(out, "cells")
    rep = str(tmp_path / "rep")
    dirs = [os.path.join(cells, d) for d in ("SS", "MM", "MM-text")]
    assert main(["report", *dirs, "--out", rep, "--quiet"]) == 0
    assert open(os.path.join(rep, "eval_report.csv")).read() == open(os.path.join(out, "eval_report.csv")).read()
    assert open(os.path.join(rep, "auc_roc.svg"), "rb").read() == open(os.path.join(out, "auc_roc.svg"), "rb").read()

    single = str(tmp_path / "single")
    assert main(["report", dirs[0], "--out", single, "--quiet"]) == 0
    assert open(os.path.join(single, "eval_report.csv")).read() == open(os.path.join(dirs[0], "eval.csv")).read()


def test_report_malformed_dir_exit_3(prepared, tmp_path, capsys):
    bad = tmp_path / "notarun"
    bad.mkdir()
    assert main(["report", str(bad), "--out", str(tmp_path / "r")]) == 3
    assert "notarun" in capsys.readouterr().err


def test_report_pairing_violation_exit_4(prepared, tmp_path):
    cfg, out = prepared
    assert main(["train", "--config", cfg, "--out", os.path.join(out, "a"), "--manifest",
                 os.path.join(out, "manifest.jsonl"), "--split", os.path.join(out, "split.json"),
                 "--cell", "SS@tissue", "--quiet"]) == 0
    other = str(tmp_path / "other")
    assert main(["split", "--config", cfg, "--out", other, "--manifest", os.path.join(out, "manifest.jsonl"),
                 "--seed", "9", "--quiet"]) == 0
    assert main(["train", "--config", cfg, "--out", os.path.join(other, "b"), "--manifest",
                 os.path.join(out, "manifest.jsonl"), "--split", os.path.join(other, "split.json"),
                 "--cell", "SS@tissue", "--quiet"]) == 0
    assert main(["report", os.path.join(out, "a"), os.path.join(other, "b"), "--out",
                 str(tmp_path / "r"), "--quiet"]) == 4


def test_eval_command(prepared):
    cfg, out = prepared
    run = os.path.join(out, "run")
    assert main(["train", "--config", cfg, "--out", run, "--manifest", os.path.join(out, "manifest.jsonl"),
                 "--split", os.path.join(out, "split.json"), "--name", "base", "--quiet"]) == 0
    ev = os.path.join(out, "ev")
    assert main(["eval", "--config", cfg, "--out", ev, "--manifest", os.path.join(out, "manifest.jsonl"),
                 "--split", os.path.join(out, "split.json"),
                 "--checkpoint", os.path.join(run, "checkpoint.ckpt"), "--quiet"]) == 0
    stored = [l for l in open(os.path.join(run, "eval.csv")).read().splitlines() if l.startswith("test,")]
    fresh = open(os.path.join(ev, "eval.csv")).read().splitlines()[1:]
    assert stored == fresh
    assert main(["eval", "--config", cfg, "--out", ev, "--checkpoint", os.path.join(out, "nope.ckpt"),
                 "--manifest", os.path.join(out, "manifest.jsonl"), "--split", os.path.join(out, "split.json"),
                 "--quiet"]) == 3


def test_matrix_idempotent(prepared, tmp_path):
    cfg, out = prepared
    args = ["matrix", "--config", cfg, "--out", out, "--cells", "SM", "--quiet"]
    assert main(args) == 0
    first = open(os.path.join(out, "eval_report.csv"), "rb").read()
    shutil.rmtree(os.path.join(out, "cells"))
    assert main(args) == 0
    assert open(os.path.join(out, "eval_report.csv"), "rb").read() == first
