"""CLI harness tests: config parsing and precedence, metric-file
determinism and round-trips, summaries, and comparisons."""

import json
import os

import numpy as np
import pytest

from fedguide.cli import (
    ExperimentConfig,
    compare_runs,
    format_comparison,
    format_metrics_csv,
    main,
    parse_config,
    read_metrics_csv,
    run_experiment,
)
from fedguide.errors import ConfigError
from fedguide.federation import RunConfig, TaskConfig

TINY = [
    "--clients", "6", "--rounds", "5", "--warmup", "1", "--quiz-size", "5",
    "--class-count", "6", "--input-dim", "8", "--samples-per-class", "60",
    "--cluster-spread", "0.6", "--partition", "dirichlet:1.0", "--feature-dim", "8",
]


def test_parse_config_defaults():
    cfg = parse_config([])
    assert cfg.run == RunConfig()
    assert cfg.run.task == TaskConfig()
    assert cfg.run.task.source == "synthetic"
    assert cfg.seeds == (1,)
    assert cfg.run.eta_c == 0.01
    assert cfg.run.batch_size == 10
    assert cfg.run.warmup == 50
    assert cfg.run.quiz_size == 10


def test_parse_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="rho"):
        parse_config(["--rho", "0"])
    with pytest.raises(ConfigError, match="partition"):
        parse_config(["--partition", "zipf:2"])
    with pytest.raises(ConfigError, match="noise"):
        parse_config(["--noise", "abc"])


def test_parse_config_method_sets_space_dimension():
    cfg = parse_config(["--method", "fedl2g-f", "--feature-dim", "24"])
    assert cfg.run.space == "feature"
    assert cfg.run.vector_dim == 24
    cfg = parse_config(["--method", "fedl2g-l"])
    assert cfg.run.space == "logit"
    assert cfg.run.vector_dim == cfg.run.task.class_count


def test_parse_config_file_flags_env_precedence(tmp_path, monkeypatch):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"rounds": 7, "method": "fedproto", "rho": 0.5, "warmup": 0}))
    monkeypatch.setenv("FEDGUIDE_RHO", "0.25")
    cfg = parse_config(["--config", str(path), "--rounds", "9"])
    assert cfg.run.rounds == 9  # flag beats file
    assert cfg.run.method == "fedproto"  # file beats default
    assert cfg.run.rho == 0.25  # env beats file


def test_parse_config_unknown_file_key_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"lerning_rate": 0.1}))
    with pytest.raises(ConfigError, match="lerning_rate"):
        parse_config(["--config", str(path)])


def test_parse_config_seed_list_and_noise():
    cfg = parse_config(["--seed", "1,2,3", "--noise", "0.05:0.2"])
    assert cfg.seeds == (1, 2, 3)
    assert cfg.run.noise_s == 0.05
    assert cfg.run.noise_p == 0.2


def test_repeated_seed_gives_byte_identical_metric_files(tmp_path):
    cfg = parse_config(TINY + ["--method", "local-only", "--seed", "2,2", "--out", str(tmp_path)])
    summary = run_experiment(cfg)
    paths = [os.path.join(str(tmp_path), n) for n in summary["metric_files"]]
    assert len(paths) == 2 and paths[0] != paths[1]
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_local_only_metric_files_zero_bytes(tmp_path):
    cfg = parse_config(TINY + ["--method", "local-only", "--seed", "1", "--out", str(tmp_path)])
    summary = run_experiment(cfg)
    cols = read_metrics_csv(os.path.join(str(tmp_path), summary["metric_files"][0]))
    assert (cols["upload_bytes"] == 0).all()
    assert (cols["download_bytes"] == 0).all()


def test_metric_files_roundtrip_and_header(tmp_path):
    cfg = parse_config(TINY + ["--method", "fedl2g-l", "--seed", "4", "--out", str(tmp_path)])
    summary = run_experiment(cfg)
    path = os.path.join(str(tmp_path), summary["metric_files"][0])
    cols = read_metrics_csv(path)
    assert cols["round"].tolist() == [1, 2, 3, 4, 5]
    # shortest-roundtrip float formatting survives a parse-and-format cycle
    with open(path, encoding="utf-8") as fh:
        original = fh.read()
    assert original.startswith("round,accuracy,")
    assert (cols["accuracy"] >= 0).all() and (cols["accuracy"] <= 1).all()


def test_summary_statistics_over_seeds(tmp_path):
    cfg = parse_config(TINY + ["--method", "local-only", "--seed", "1,2", "--out", str(tmp_path)])
    summary = run_experiment(cfg)
    assert summary["schema"] == "fedguide-summary-v1"
    assert len(summary["final_accuracy"]) == 2
    assert summary["final_accuracy_mean"] == pytest.approx(
        float(np.mean(summary["final_accuracy"]))
    )
    assert summary["final_accuracy_std"] == pytest.approx(
        float(np.std(summary["final_accuracy"]))
    )


def test_compare_runs_identical_summaries_identical_rows(tmp_path):
    cfg = parse_config(TINY + ["--method", "local-only", "--seed", "1", "--out", str(tmp_path)])
    s = run_experiment(cfg)
    rows = compare_runs([s, json.loads(json.dumps(s))])
    assert rows[0] == rows[1]


def test_compare_runs_orders_by_accuracy_and_rejects_mismatch(tmp_path):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    sa = run_experiment(parse_config(TINY + ["--method", "local-only", "--seed", "1", "--out", out_a]))
    sb = run_experiment(parse_config(TINY + ["--method", "fedproto", "--seed", "1", "--out", out_b]))
    rows = compare_runs([sa, sb])
    assert rows[0]["accuracy_mean"] >= rows[1]["accuracy_mean"]
    text = format_comparison(rows)
    assert rows[0]["method"] in text.splitlines()[2]
    # different task -> error
    sc = run_experiment(
        parse_config(
            TINY[:-2] + ["--feature-dim", "8", "--cluster-spread", "0.7",
                         "--method", "local-only", "--seed", "1", "--out", str(tmp_path / "c")]
        )
    )
    with pytest.raises(ConfigError, match="different tasks"):
        compare_runs([sa, sc])


def test_main_run_and_compare_end_to_end(tmp_path, capsys):
    out1 = str(tmp_path / "r1")
    out2 = str(tmp_path / "r2")
    assert main(["run", *TINY, "--method", "local-only", "--seed", "1", "--out", out1]) == 0
    assert main(["run", *TINY, "--method", "feddistill", "--seed", "1", "--out", out2]) == 0
    s1 = os.path.join(out1, "summary_local-only.json")
    s2 = os.path.join(out2, "summary_feddistill.json")
    cmp_out = str(tmp_path / "cmp")
    assert main(["compare", s1, s2, "--out", cmp_out]) == 0
    assert os.path.exists(os.path.join(cmp_out, "comparison.json"))
    assert os.path.exists(os.path.join(cmp_out, "comparison.txt"))
    captured = capsys.readouterr()
    assert "method" in captured.out


def test_main_unknown_command_and_bad_flags(tmp_path, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["run", "--rho", "0", "--out", str(tmp_path)]) == 2
    captured = capsys.readouterr()
    assert "error" in captured.err


def test_format_metrics_csv_is_deterministic():
    from fedguide.metrics import RoundMetrics

    m = RoundMetrics(1, 0.5, np.array([0.5]), 1.25, 0.0, 10, 20, 0.125, 1, 2, 99.0)
    assert format_metrics_csv([m]) == format_metrics_csv([m])
    line = format_metrics_csv([m]).splitlines()[1]
    assert line == "1,0.5,1.25,0.0,10,20,0.125"
