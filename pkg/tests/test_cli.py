import orjson
import pandas as pd
import pytest
from click.testing import CliRunner

from app import cli, main

SMALL = [
    "--set", "D=4", "--set", "N=5", "--set", "M_b=1", "--set", "I_a=4", "--set", "I_l=4", "--set", "I_t=4",
    "--set", "epochs_ei=1", "--set", "epochs_sr=1", "--set", "eval_negatives=5", "--set", "pretrained_dim=6",
]


@pytest.fixture
def runner(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "ERROR")
    return CliRunner()


@pytest.fixture
def corpus_path(runner, tmp_path):
    path = tmp_path / "fixture.csv"
    result = runner.invoke(cli, ["synth", "--users", "12", "--pois", "10", "--seed", "7", "--out", str(path)])
    assert result.exit_code == 0, result.output
    return path


@pytest.fixture
def trained(runner, corpus_path, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(cli, ["train", "--data", str(corpus_path), "--out", str(out), "--seed", "3", *SMALL])
    assert result.exit_code == 0, result.output
    return out, orjson.loads(result.stdout)


def test_synth_is_byte_identical_across_runs(runner, tmp_path):
    args = ["synth", "--users", "20", "--pois", "10", "--seed", "7"]
    first = runner.invoke(cli, args).stdout
    assert first == runner.invoke(cli, args).stdout
    assert first != runner.invoke(cli, ["synth", "--users", "20", "--pois", "10", "--seed", "8"]).stdout
    runner.invoke(cli, args + ["--out", str(tmp_path / "a.jsonl")])
    runner.invoke(cli, args + ["--out", str(tmp_path / "b.jsonl")])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_train_writes_artifacts(trained):
    out, summary = trained
    for name in ("checkpoint.rvsr", "ei.rvei", "relative_cache.rvrc", "metrics.csv", "summary.csv", "report.json"):
        assert (out / name).is_file()
    assert summary["runs"] == 1
    assert "hits@10" in summary["test"]
    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics.columns) == ["variant", "epoch", "split", "metric", "k", "value", "seed"]
    assert set(metrics["split"]) == {"train", "val", "test"}


def test_eval_reproduces_training_report(runner, trained, corpus_path):
    out, summary = trained
    result = runner.invoke(cli, ["eval", "--checkpoint", str(out / "checkpoint.rvsr"), "--data", str(corpus_path)])
    assert result.exit_code == 0, result.output
    assert orjson.loads(result.stdout)["metrics"] == summary["test"]


def test_eval_with_ranks_and_fewer_negatives(runner, trained, corpus_path):
    out, _ = trained
    result = runner.invoke(cli, ["eval", "--checkpoint", str(out / "checkpoint.rvsr"), "--data", str(corpus_path),
                                 "--negatives", "3", "--ranks", "--workers", "2"])
    report = orjson.loads(result.stdout)
    assert set(report["negatives"]) == {3}
    assert all(1 <= r <= 4 for r in report["ranks"])


@pytest.mark.parametrize("name,kind", [
    ("checkpoint.rvsr", "sr"), ("ei.rvei", "ei"), ("relative_cache.rvrc", "relative_cache"),
])
def test_inspect_each_checkpoint_kind(runner, trained, name, kind):
    out, _ = trained
    result = runner.invoke(cli, ["inspect", "--checkpoint", str(out / name)])
    assert result.exit_code == 0, result.output
    assert orjson.loads(result.stdout)["kind"] == kind


def test_recommend_lists_pois_and_categories(runner, trained, corpus_path):
    out, _ = trained
    result = runner.invoke(cli, ["recommend", "--checkpoint", str(out / "checkpoint.rvsr"),
                                 "--data", str(corpus_path), "--user", "0", "--top", "3"])
    assert result.exit_code == 0, result.output
    rec = orjson.loads(result.stdout)
    assert len(rec["pois"]) == 3 and all(p["poi"] < 10 for p in rec["pois"])
    assert rec["app_categories"][0]["name"].startswith("app:")


def test_unknown_user_is_a_usage_error(runner, trained, corpus_path):
    out, _ = trained
    result = runner.invoke(cli, ["recommend", "--checkpoint", str(out / "checkpoint.rvsr"),
                                 "--data", str(corpus_path), "--user", "999"])
    assert result.exit_code == 2


def test_vocabulary_mismatch_fails(runner, trained, tmp_path):
    out, _ = trained
    other = tmp_path / "other.csv"
    runner.invoke(cli, ["synth", "--users", "12", "--pois", "14", "--out", str(other)])
    result = runner.invoke(cli, ["eval", "--checkpoint", str(out / "checkpoint.rvsr"), "--data", str(other)])
    assert result.exit_code == 1


def test_corrupt_checkpoint_exits_one(runner, tmp_path, corpus_path):
    bad = tmp_path / "bad.rvsr"
    bad.write_bytes(b"RVSR\x01\x00")
    result = runner.invoke(cli, ["eval", "--checkpoint", str(bad), "--data", str(corpus_path)])
    assert result.exit_code == 1


@pytest.mark.parametrize("extra", [["--set", "gamma=4"], ["--set", "novalue"], ["--set", "colour=red"]])
def test_bad_configuration_exits_two(runner, corpus_path, tmp_path, extra):
    result = runner.invoke(cli, ["train", "--data", str(corpus_path), "--out", str(tmp_path / "x"), *extra])
    assert result.exit_code == 2


def test_ablate_writes_one_row_per_variant(runner, corpus_path, tmp_path):
    out = tmp_path / "ablation"
    result = runner.invoke(cli, ["ablate", "--data", str(corpus_path), "--out", str(out), "--runs", "1", *SMALL])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "ablation.csv")
    assert table["variant"].tolist() == ["full", "-t", "-a", "-l", "none"]


def test_main_returns_exit_codes(monkeypatch, capsys):
    monkeypatch.setenv("LOG_LEVEL", "ERROR")
    assert main(["synth", "--users", "2", "--pois", "4"]) == 0
    assert main(["train"]) == 2
    monkeypatch.setenv("LOG_FORMAT", "yaml")
    assert main(["synth"]) == 2


def test_non_integer_worker_count_exits_two(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "ERROR")
    monkeypatch.setenv("REVAMP_WORKERS", "many")
    assert main(["synth", "--users", "2", "--pois", "4"]) == 2
