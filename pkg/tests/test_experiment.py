import csv
import dataclasses
import json
import math

import numpy as np
import pytest
import yaml

from npbml.checks import desk_config
from npbml.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, main
from npbml.config import ConfigError, from_dict, load_config
from npbml.experiment import (ABLATION_ROWS, EvalReport, SplitError, TaskRecord, ablation, evaluate,
                              evaluate_learner, half_width, read_records, run, write_records)
from npbml.model import Variant
from npbml.tasks import ClusterFamily


@pytest.fixture
def tiny():
    return desk_config("tiny")


def test_config_round_trip(tmp_path, tiny):
    path = tiny.dump(tmp_path / "c.yaml")
    assert load_config(path) == tiny
    for name in ("sinusoid", "cluster"):
        cfg = desk_config(name)
        assert from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("data, field", [
    ({"inner": {"alpha": -1}}, "inner.alpha"),
    ({"inner": {"alhpa": 0.1}}, "inner.alhpa"),
    ({"task": {"family": "mnist"}}, "task.family"),
    ({"task": {"n_way": "five"}}, "task.n_way"),
    ({"precision": "half"}, "precision"),
    ({"seeds": []}, "seeds"),
    ({"schema_version": 99}, "schema_version"),
    ({"bogus": 1}, "bogus"),
    ({"task": {"n_way": 30}}, "task.n_val"),
    ({"task": {"n_way": 40}}, "task.n_train"),
])
def test_config_errors_name_the_field(data, field):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.field == field


def test_half_width_formula_and_report():
    vals = np.array([0.2, 0.6, 0.4, 0.8])
    assert half_width(vals) == pytest.approx(1.96 * vals.std(ddof=1) / 2)
    recs = [TaskRecord(i, v, 1.0, s) for s, chunk in enumerate([vals, vals[::-1]]) for i, v in enumerate(chunk)]
    rep = EvalReport.from_records(recs)
    assert rep.task_count == 8 and rep.metric == "accuracy"
    assert [p["seed"] for p in rep.per_seed] == [0, 1]
    assert rep.mean == pytest.approx(0.5)


def test_perfect_classifier_stub(tiny):
    fam, ts = tiny.family(), tiny.task_spec()
    recs = evaluate_learner(lambda ep: (1.0, 0.0), fam, ts, n_tasks=50)
    rep = EvalReport.from_records(recs)
    assert rep.mean == 1.0 and rep.half_width == 0.0
    with pytest.raises(SplitError):
        evaluate_learner(lambda ep: (1.0, 0.0), fam, ts, n_tasks=5, split="train")


def test_regression_divergence_counted_not_averaged():
    recs = [TaskRecord(0, None, 1.0, 0), TaskRecord(1, None, 3.0, 0), TaskRecord(2, None, float("nan"), 0)]
    rep = EvalReport.from_records(recs)
    assert rep.metric == "mse" and rep.mean == pytest.approx(2.0) and rep.diverged == 1


def test_records_csv_round_trip(tmp_path):
    recs = [TaskRecord(0, 0.5, 1.25, 3), TaskRecord(1, None, 2.0, 3)]
    write_records(tmp_path / "r.csv", recs)
    assert read_records(tmp_path / "r.csv") == recs


def test_run_with_zero_meta_steps_and_determinism(tmp_path, tiny):
    cfg = tiny.replace(meta=dataclasses.replace(tiny.meta, steps=0))
    a = run(cfg, tmp_path / "a", 0)
    b = run(cfg, tmp_path / "b", 0)
    assert a.report == b.report
    assert a.report.task_count == cfg.eval.n_tasks
    for name in ("best.npz", "metrics.jsonl", "records.csv", "eval_report.json", "config.resolved.yaml",
                 "learning_curve.csv", "learning_curve.png"):
        assert (tmp_path / "a" / name).exists()
    assert load_config(tmp_path / "a" / "config.resolved.yaml") == cfg.with_seed(0)
    # CI reproducible from the raw records
    with open(tmp_path / "a" / "records.csv", newline="") as fh:
        acc = [float(r["accuracy"]) for r in csv.DictReader(fh)]
    report = json.loads((tmp_path / "a" / "eval_report.json").read_text())
    assert report["half_width"] == pytest.approx(1.96 * np.std(acc, ddof=1) / math.sqrt(len(acc)), abs=1e-12)


def test_run_resumes_from_state(tmp_path, tiny):
    a = run(tiny, tmp_path / "a", 0)
    b = run(tiny, tmp_path / "a", 0)  # already complete: resumes at the end
    assert a.report == b.report
    assert len(b.metrics) == tiny.meta.steps + 1


def test_evaluate_checkpoint_and_split_guard(tmp_path, tiny):
    run(tiny, tmp_path / "r", 0)
    rep, recs = evaluate(tmp_path / "r" / "best.npz", n_tasks=10)
    assert rep.task_count == 10 and len(recs) == 10
    with pytest.raises(SplitError):
        evaluate(tmp_path / "r" / "best.npz", n_tasks=5, split="train")
    # a family whose test pool contains the checkpoint's meta-train classes
    t = tiny.task
    shuffled = ClusterFamily(t.n_train, t.n_val, t.n_test, t.dim, t.radius, t.noise, t.family_seed + 1)
    with pytest.raises(SplitError):
        evaluate(tmp_path / "r" / "best.npz", n_tasks=5, family=shuffled)


def test_ablation_matrix(tmp_path, tiny):
    assert len(ABLATION_ROWS) == 10
    assert ABLATION_ROWS[0].variant == Variant.maml()
    assert {r.row: r.reuses for r in ABLATION_ROWS if r.reuses} == {6: 1, 10: 3}
    cfg = tiny.replace(meta=dataclasses.replace(tiny.meta, steps=2), eval=dataclasses.replace(tiny.eval, n_tasks=5))
    table = ablation(cfg, tmp_path)
    assert [t["row"] for t in table] == list(range(1, 11))
    assert all(t["status"] == "ok" for t in table)
    assert table[5]["mean"] == table[0]["mean"] and table[9]["mean"] == table[2]["mean"]
    run_dirs = sorted(p.name for p in tmp_path.iterdir() if p.name.startswith("row_"))
    assert run_dirs == [f"row_{i}" for i in (1, 2, 3, 4, 5, 7, 8, 9)]
    assert (tmp_path / "ablation.txt").read_text().count("\n") == 11
    assert (tmp_path / "ablation.png").exists() and (tmp_path / "ablation.csv").exists()


def test_ablation_marks_failed_rows(tmp_path, tiny, monkeypatch):
    import npbml.experiment as exp
    real = exp.run

    def flaky(cfg, out, seed, **kw):
        if cfg.variant.use_warp:
            raise FloatingPointError("boom")
        return real(cfg, out, seed, **kw)
    monkeypatch.setattr(exp, "run", flaky)
    cfg = tiny.replace(meta=dataclasses.replace(tiny.meta, steps=1), eval=dataclasses.replace(tiny.eval, n_tasks=3))
    table = ablation(cfg, tmp_path, rows=(1, 2))
    assert table[0]["status"] == "ok" and table[1]["status"] == "failed"
    assert "FAILED" in (tmp_path / "ablation.txt").read_text()


def test_cli_dry_run_and_errors(tmp_path, capsys):
    cfg_path = desk_config("tiny").dump(tmp_path / "tiny.yaml")
    assert main(["run", "--config", str(cfg_path), "--dry-run", "--precision", "single"]) == 0
    out = yaml.safe_load(capsys.readouterr().out)
    assert out["precision"] == "single"
    bad = tmp_path / "bad.yaml"
    bad.write_text("inner: {alpha: -1}\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "inner" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.npz")]) == EXIT_IO


def test_cli_run_evaluate_ablate(tmp_path, capsys):
    cfg = desk_config("tiny")
    cfg = cfg.replace(meta=dataclasses.replace(cfg.meta, steps=1), eval=dataclasses.replace(cfg.eval, n_tasks=4))
    cfg_path = cfg.dump(tmp_path / "tiny.yaml")
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "run"), "--seed", "0", "1"]) == 0
    assert (tmp_path / "run" / "seed_1" / "best.npz").exists()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "seed_0" / "best.npz"), "--n-tasks", "3",
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "records.csv").exists()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "seed_0" / "best.npz"),
                 "--split", "train"]) == EXIT_CONFIG
    assert main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "abl"), "--rows", "1", "6"]) == 0
    assert "(= row 1)" in capsys.readouterr().out


def test_cli_check_reports_failures(monkeypatch, capsys):
    import npbml.checks as checks
    from npbml.checks import CheckResult
    monkeypatch.setattr(checks, "run_checks", lambda full=False, out_dir=None: [CheckResult(1, "x", False, "bad")])
    assert main(["check"]) == EXIT_CHECK
    assert "[FAIL]" in capsys.readouterr().out
