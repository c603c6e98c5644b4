import csv
import json
import time

import pytest

from plan2vec import cli, plots

FAST = ["--layout", "open", "--n-rollouts", "30", "--lm-epochs", "3", "--iterations", "4", "--eval-tasks", "10",
        "--lookahead-ks", "1,2", "--cost-lengths", "1,2", "--cost-queries", "2"]


@pytest.fixture(scope="module")
def fast_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    assert cli.main(["pipeline", *FAST, "--out", str(out)]) == 0
    return out


def test_pipeline_writes_every_artifact(fast_run):
    for name in ("config.json", "run.jsonl", "embedding.csv", "eval_report.json", "lookahead_curve.csv",
                 "planning_cost.csv", "planning_cost_summary.json", "data/manifest.json", "graph/graph.json",
                 "local_metric/model.json", "plan2vec/model.json", "plan2vec/plan2vec_metrics.jsonl",
                 "local_metric/local_metric_metrics.jsonl", "diagnostics/local_scatter.csv",
                 "plots/embedding.svg", "plots/lookahead_curve.svg", "plots/planning_cost.svg",
                 "plots/local_scatter.svg"):
        assert (fast_run / name).exists(), name
    assert not list(fast_run.rglob("*.tmp*")), "temporary files left behind"


def test_config_is_saved_and_hashed(fast_run):
    cfg = json.loads((fast_run / "config.json").read_text())
    assert cfg["schema_version"] == 1 and cfg["layout"] == "open" and cfg["n_rollouts"] == 30
    rebuilt = cli.RunConfig(**{k: v for k, v in cfg.items() if k in cli.CONFIG_FIELDS})
    assert rebuilt.hash == cfg["config_hash"]
    for name in ("graph/graph.json", "plan2vec/model.json", "data/manifest.json"):
        assert json.loads((fast_run / name).read_text())["config_hash"] == cfg["config_hash"], name


def test_stage_records(fast_run):
    rows = [json.loads(l) for l in (fast_run / "run.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in rows] == [name for name, _ in cli.PIPELINE]
    for r in rows:
        assert r["duration_s"] >= 0 and isinstance(r["inputs"], dict) and r["outputs"]
    graph_row = rows[2]
    assert set(graph_row["inputs"]) == {"data", "local_metric"} and set(graph_row["outputs"]) == {"graph"}
    assert all(len(h) == 64 for h in graph_row["inputs"].values())


def test_eval_report_fields(fast_run):
    rep = json.loads((fast_run / "eval_report.json").read_text())
    assert set(rep["success"]["methods"]) == {"Plan2vecValue", "LocalMetricGreedy", "GraphTruthOracle", "Random"}
    assert rep["success"]["methods"]["GraphTruthOracle"]["rate"] == 1.0
    assert [(r["method"], r["k"]) for r in rep["lookahead_curve"]] == [
        ("Plan2vecValue", 1), ("Plan2vecValue", 2), ("LocalMetricGreedy", 1), ("LocalMetricGreedy", 2)]


def test_plot_point_count_equals_csv_rows(fast_run, tmp_path):
    src = fast_run / "embedding.csv"
    with open(src) as f:
        n_rows = sum(1 for _ in csv.DictReader(f))
    out = tmp_path / "e.svg"
    assert cli.main(["plot", str(src), "--output", str(out)]) == 0
    assert plots.count_points(out.read_text()) == n_rows
    again = tmp_path / "f.svg"
    cli.main(["plot", str(src), "--output", str(again)])
    assert again.read_bytes() == out.read_bytes()


def test_missing_graph_reports_expected_path(tmp_path, capsys):
    out = tmp_path / "r"
    assert cli.main(["gen-data", *FAST, "--out", str(out)]) == 0
    assert cli.main(["train-local", *FAST, "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["train-plan2vec", *FAST, "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "graph.json" in err and str(out) in err


def test_missing_csv_is_a_precondition_failure(tmp_path, capsys):
    assert cli.main(["plot", str(tmp_path / "nope.csv")]) == 2
    assert "nope.csv" in capsys.readouterr().err


def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    parser = cli.build_parser()
    cfg = cli.resolve_config(parser.parse_args(["gen-data", "--seed", "3"]))
    assert cfg.out == str(tmp_path / "root" / "open-seed3") or cfg.out.endswith("seed3")
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"layout": "table", "d0": 2.0, "seed": 5}))
    cfg = cli.resolve_config(parser.parse_args(["gen-data", "--config", str(conf), "--seed", "9"]))
    assert (cfg.layout, cfg.d0, cfg.seed) == ("table", 2.0, 9)
    conf.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        cli.resolve_config(parser.parse_args(["gen-data", "--config", str(conf)]))


def test_saved_config_reproduces_run(fast_run):
    args = cli.build_parser().parse_args(["evaluate", "--out", str(fast_run)])
    cfg = cli.resolve_config(args)
    saved = json.loads((fast_run / "config.json").read_text())
    assert cfg.hash == saved["config_hash"]


def test_hash_ignores_output_location_and_workers():
    a = cli.RunConfig(out="x", workers=1)
    b = cli.RunConfig(out="y", workers=4)
    assert a.hash == b.hash
    assert a.hash != cli.RunConfig(seed=1).hash


def test_bad_layout_exit_code(capsys):
    assert cli.main(["gen-data", "--layout", "spiral", "--out", "/nonexistent/x"]) == 2
    assert "spiral" in capsys.readouterr().err


def test_stage_reruns_are_byte_identical(fast_run, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["pipeline", *FAST, "--out", str(out)]) == 0
    for name in ("eval_report.json", "embedding.csv", "graph/edges.bin", "planning_cost.csv"):
        assert (out / name).read_bytes() == (fast_run / name).read_bytes(), name


@pytest.mark.slow
def test_smallest_config_pipeline_under_five_minutes(tmp_path):
    t0 = time.time()
    assert cli.main(["pipeline", "--layout", "c-maze", "--n-rollouts", "100", "--out", str(tmp_path / "r")]) == 0
    assert time.time() - t0 < 300
