import json

import numpy as np
import pytest

from unlearnprobe import cli
from unlearnprobe.harness import (RESULT_COLUMNS, WORKERS_ENV, ConfigError, ExperimentConfig, derive_seed,
                                  results_csv, run_experiment, summarize, worker_count, write_results)

TINY = {
    "dataset": {"kind": "synth", "name": "tiny", "n": 40, "classes": 2, "features": 6, "p_in": 0.2, "p_out": 0.02},
    "split": {"per_class_train": 8, "per_class_val": 2},
    "train": {"hidden": 8, "epochs": 20},
    "deletion": {"policies": ["random", "worst"], "fraction": 0.15, "removal_sizes": [1, 2], "groups": 2},
    "attack": {"max_iters": 20},
    "trials": 2,
}


@pytest.fixture(scope="module")
def tiny_rows():
    return run_experiment(ExperimentConfig.from_dict(TINY))


def test_defaults_are_filled_in():
    cfg = ExperimentConfig.from_dict({})
    assert cfg["train"]["hidden"] == 256 and cfg["defense"]["kind"] == "none"
    assert cfg["baselines"] == ["Rand.", "FewE", "Toxin"]


@pytest.mark.parametrize("bad", [
    {"backbone": "GAT"}, {"mode": "grey"}, {"trials": 0}, {"deletion": {"policies": []}},
    {"deletion": {"removal_sizes": [0]}}, {"baselines": ["Oracle"]}, {"schema_version": 2},
    {"surprise": 1}, {"attack": {"lr": -1}}, {"attack": {"bogus": 1}}, {"defense": {"kind": "dp"}},
    {"dataset": {"kind": "files"}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        ExperimentConfig.load(p)


def test_derive_seed_is_stable():
    assert derive_seed(0, 1) == derive_seed("0", "1")
    assert derive_seed(0, 1) != derive_seed(1, 0)
    assert 0 <= derive_seed("x") < 2**31
    import hashlib
    assert derive_seed(7, "data") == int.from_bytes(hashlib.sha256(b"7:data").digest()[:4], "big") & 0x7FFFFFFF


def test_result_table_shape(tiny_rows):
    assert len(tiny_rows) == 2 * 2 * 2 * 3
    first = tiny_rows[0]
    assert (first["trial"], first["policy"], first["removal_size"], first["baseline"]) == (0, "random", 1, "Rand.")
    assert all(set(RESULT_COLUMNS) == set(r) for r in tiny_rows)
    assert sum(r["failed"] for r in tiny_rows) == 0
    text = results_csv(tiny_rows)
    assert text.splitlines()[0] == ",".join(RESULT_COLUMNS)


def test_summary_means(tiny_rows):
    summary = summarize(tiny_rows)
    key = ("random", 1, "Toxin")
    rows = [r for r in tiny_rows if (r["policy"], r["removal_size"], r["baseline"]) == key]
    assert summary[key]["nrmse"] == pytest.approx(np.mean([r["nrmse"] for r in rows]))


def test_rerun_is_byte_identical(tmp_path, tiny_rows):
    cfg = ExperimentConfig.from_dict(TINY)
    a = write_results(tiny_rows, cfg, tmp_path / "a")
    b = write_results(run_experiment(cfg), cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    assert json.loads((tmp_path / "a" / "config.json").read_text())["trials"] == 2


def test_worker_count_follows_environment(monkeypatch):
    cfg = ExperimentConfig.from_dict({"workers": 3})
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert worker_count(cfg) == 3
    monkeypatch.setenv(WORKERS_ENV, "1")
    assert worker_count(cfg) == 1
    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(ConfigError):
        worker_count(cfg)


def test_parallel_run_matches_serial(monkeypatch, tiny_rows):
    monkeypatch.setenv(WORKERS_ENV, "2")
    assert results_csv(run_experiment(ExperimentConfig.from_dict(TINY))) == results_csv(tiny_rows)


# -- command line -----------------------------------------------------------------
def test_cli_bad_flags_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["experiment", "--config"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["attack", "--unlearned", "x", "--out", "y", "--mode", "grey"])
    assert info.value.code == 2


def test_cli_bad_config_exit_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"backbone": "GAT"}))
    assert cli.main(["experiment", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "backbone" in capsys.readouterr().err
    assert cli.main(["experiment", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_cli_pipeline(tmp_path, capsys):
    d = str(tmp_path)
    assert cli.main(["gen", "--n", "40", "--classes", "2", "--features", "6", "--p-in", "0.2", "--p-out", "0.02",
                     "--seed", "3", "--out", d]) == 0
    graph = ["--nodes", f"{d}/nodes.csv", "--edges", f"{d}/edges.csv", "--per-class-train", "8",
             "--per-class-val", "2"]
    assert cli.main(["train", *graph, "--hidden", "8", "--epochs", "20", "--out", f"{d}/model.json"]) == 0
    train_acc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["train_acc"]
    assert 0 <= train_acc <= 1
    from unlearnprobe.graph import load_graph, split
    g = split(load_graph(f"{d}/nodes.csv", f"{d}/edges.csv"), 8, 2, 0)
    v = int(np.flatnonzero(g.train_mask)[0])
    assert cli.main(["unlearn", *graph, "--model", f"{d}/model.json", "--delete", str(v),
                     "--out", f"{d}/un"]) == 0
    assert cli.main(["attack", "--unlearned", f"{d}/un", "--max-iters", "10", "--out", f"{d}/att"]) == 0
    assert cli.main(["attack", "--unlearned", f"{d}/un", "--mode", "black", "--out", f"{d}/att"]) == 2
    capsys.readouterr()
    assert cli.main(["eval", *graph, "--unlearned", f"{d}/un", "--attack", f"{d}/att"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"nrmse", "ed", "pmgk", "att_acc", "att_fid", "pwd"}


def test_cli_experiment(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(dict(TINY, trials=1, deletion=dict(TINY["deletion"], removal_sizes=[1]))))
    assert cli.main(["experiment", "--config", str(p), "--out", str(tmp_path / "o"), "--policy", "worst"]) == 0
    lines = (tmp_path / "o" / "results.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 and all(",worst," in line for line in lines[1:])


def test_cli_selfcheck(capsys):
    assert cli.main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "0 failed" in out
