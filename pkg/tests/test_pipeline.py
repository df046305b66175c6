from types import SimpleNamespace

import pandas as pd
import pytest

from services.evaluation import evaluate
from services.metrics import K_LIST
from services.pipeline import (
    METRIC_COLUMNS, MetricRow, TrainingPipeline, aggregate, eval_root, run_ablation, summarize,
    train_pipeline, train_runs, write_metrics_csv,
)
from services.recommender import SequentialRecommender
from utils.errors import NumericError, TrainingError, UsageError


@pytest.fixture
def result(tiny_corpus, tiny_config):
    return train_pipeline(tiny_corpus, tiny_config)


def test_pipeline_rows_cover_every_epoch(result, tiny_config):
    frame = pd.DataFrame([vars(r) for r in result.rows])
    assert sorted(frame.loc[frame["split"] == "val", "epoch"].unique()) == [0, 1, 2]
    assert frame.loc[frame["metric"] == "loss", "epoch"].tolist() == [1, 2]
    test = frame[frame["split"] == "test"]
    assert set(test["epoch"]) == {result.best_epoch}
    assert {"hits", "ndcg", "mrr", "rms_app", "rms_poi"} == set(test["metric"])
    assert len(result.losses) == tiny_config.epochs_sr


def test_best_validation_parameters_are_restored(result, tiny_config):
    again = evaluate(result.model, result.split, eval_root(tiny_config.seed, "val"), K_LIST, phase="val")
    assert again.metrics == result.best_val.metrics
    assert result.test_report.phase == "test"


def test_pipeline_is_deterministic(tmp_path, tiny_corpus, tiny_config, result):
    other = train_pipeline(tiny_corpus, tiny_config)
    assert other.checkpoint_bytes() == result.checkpoint_bytes()
    first = write_metrics_csv(tmp_path / "a.csv", result.rows).read_bytes()
    second = write_metrics_csv(tmp_path / "b.csv", other.rows).read_bytes()
    assert first == second


def test_metrics_csv_layout(tmp_path):
    rows = [
        MetricRow("full", 3, "test", "hits", 10, 0.25, 7),
        MetricRow("full", 3, "test", "mrr", None, 0.125, 7),
    ]
    text = write_metrics_csv(tmp_path / "m.csv", rows).read_text()
    assert text.splitlines() == [",".join(METRIC_COLUMNS), "full,3,test,hits,10,0.25,7", "full,3,test,mrr,,0.125,7"]


def test_aggregate():
    assert aggregate([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert aggregate([5.0]) == (5.0, 0.0)


def test_summarize_per_variant():
    rows = [
        MetricRow("full", 1, "test", "hits", 10, 0.4, 1),
        MetricRow("full", 2, "test", "hits", 10, 0.6, 2),
        MetricRow("none", 1, "test", "hits", 10, 0.2, 1),
        MetricRow("full", 1, "val", "hits", 10, 0.9, 1),
    ]
    summary = summarize(rows).set_index("variant")
    assert summary.loc["full", "hits@10"] == pytest.approx(0.5)
    assert summary.loc["full", "hits@10_std"] == pytest.approx(0.1414213562)
    assert summary.loc["full", "runs"] == 2
    assert summary.loc["none", "hits@10_std"] == 0.0


def test_numeric_failure_becomes_training_error(monkeypatch, tiny_corpus, tiny_config):
    def explode(self, *args, **kwargs):
        raise NumericError("overflow")

    monkeypatch.setattr(SequentialRecommender, "loss", explode)
    with pytest.raises(TrainingError) as info:
        train_pipeline(tiny_corpus, tiny_config)
    assert (info.value.epoch, info.value.batch) == (1, 1)


def test_non_finite_loss_becomes_training_error(monkeypatch, tiny_corpus, tiny_config):
    nan_loss = SimpleNamespace(total=SimpleNamespace(item=lambda: float("nan")))
    monkeypatch.setattr(SequentialRecommender, "loss", lambda self, *a, **k: nan_loss)
    with pytest.raises(TrainingError):
        train_pipeline(tiny_corpus, tiny_config)


def test_examples_use_train_prefixes(tiny_corpus, tiny_config, frozen_table):
    pipeline = TrainingPipeline(tiny_corpus, tiny_config, table=frozen_table)
    model = SequentialRecommender(tiny_config, frozen_table, tiny_corpus.num_pois)
    examples = pipeline.examples(model)
    assert len(examples) == 4
    # 6 check-ins leave 4 for training: inputs are the first 3, targets the next 3
    first = tiny_corpus.users[0]
    real = examples[0].targets.window.poi_ids[examples[0].targets.window.pad_mask]
    assert real.tolist() == [c.poi_id for c in first[1:4]]
    assert ("train", 0) in model.encoder.cache and ("target", 0) in model.encoder.cache


def test_train_runs_derive_seeds(tiny_corpus, tiny_config):
    results = train_runs(tiny_corpus, tiny_config.variant(epochs_sr=1), runs=2)
    assert results[0].seed == tiny_config.seed
    assert results[1].seed != results[0].seed
    with pytest.raises(UsageError):
        train_runs(tiny_corpus, tiny_config, runs=0)


def test_relative_ablation_grid(tiny_corpus, tiny_config):
    ablation = run_ablation(tiny_corpus, tiny_config.variant(epochs_sr=1), "relative", runs=1)
    assert [r.variant for r in ablation.results] == ["full", "-t", "-a", "-l", "none"]
    tables = {id(r.model.table) for r in ablation.results}
    assert len(tables) == 1
    assert set(ablation.results[-1].model.params.relative) == set()
    assert set(ablation.results[1].model.params.relative) == {"T"}

    summary = ablation.summary()
    assert summary["variant"].tolist() == ["full", "-t", "-a", "-l", "none"]
    assert {"hits@10", "hits@10_std", "ndcg@10", "mrr", "rms_app"} <= set(summary.columns)


def test_embedding_ablation_grid(tiny_corpus, tiny_config):
    ablation = run_ablation(tiny_corpus, tiny_config.variant(epochs_sr=1), "ei", runs=1)
    gammas = {r.variant: r.model.config.gamma for r in ablation.results}
    assert gammas["mf_only"] == 1.0 and gammas["pretrained_only"] == 0.0
    with pytest.raises(UsageError):
        run_ablation(tiny_corpus, tiny_config, "heads")
