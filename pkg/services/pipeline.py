"""
Two-phase training and the ablation runner

EI runs to completion on the train prefixes and its tables are frozen; the
relative matrices are then built once per window and the sequential model is
trained with per-epoch validation. The parameters with the best validation
NDCG@10 are restored before the test report.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
import structlog

from models.models import Corpus
from models.windowing import training_pair
from numcore.optim import Adam
from numcore.tensor import backward
from services.checkpoint import serialize_sr
from services.ei import CategoryEmbeddingTable, PretrainedVectors, train_ei
from services.evaluation import EvalReport, SplitCorpus, category_rms_probe, evaluate, split
from services.metrics import K_LIST
from services.recommender import SequentialRecommender, TrainingExample, sample_targets
from utils.config import RunConfig
from utils.errors import NumericError, TrainingError, UsageError
from utils.seeding import SeedUtils

logger = structlog.get_logger(__name__)

METRIC_COLUMNS = ["variant", "epoch", "split", "metric", "k", "value", "seed"]
SELECTION_METRIC = "ndcg@10"

ABLATION_GRID: dict[str, dict[str, Any]] = {
    "full": {},
    "-t": {"use_J": False, "use_K": False},
    "-a": {"use_K": False, "use_T": False},
    "-l": {"use_J": False, "use_T": False},
    "none": {"use_J": False, "use_K": False, "use_T": False},
}

EI_GRID: dict[str, dict[str, Any]] = {
    "ei": {},
    "mf_only": {"gamma": 1.0},
    "pretrained_only": {"gamma": 0.0},
}

GRIDS = {"relative": ABLATION_GRID, "ei": EI_GRID}


@dataclass(frozen=True)
class MetricRow:
    variant: str
    epoch: int
    split: str
    metric: str
    k: int | None
    value: float
    seed: int


def eval_root(seed: int, phase: str) -> int:
    """Root seed for negative sampling in one evaluation phase, fixed across epochs"""
    return int(SeedUtils.rng(seed, "eval", phase).integers(2**63 - 1))


def report_rows(report: EvalReport, variant: str, epoch: int, seed: int) -> list[MetricRow]:
    """One row per metric of an EvalReport ("hits@5" becomes metric=hits, k=5)"""
    rows = []
    for key, value in report.metrics.items():
        name, _, k = key.partition("@")
        rows.append(MetricRow(variant, epoch, report.phase, name, int(k) if k else None, value, seed))
    return rows


def metrics_frame(rows: Sequence[MetricRow]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in rows], columns=METRIC_COLUMNS)
    frame["k"] = frame["k"].astype("Int64")
    return frame


def write_metrics_csv(path: str | Path, rows: Sequence[MetricRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics_frame(rows).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return 0.0, 0.0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def summarize(rows: Sequence[MetricRow], split_name: str = "test") -> pd.DataFrame:
    """One row per variant: mean and std of every ``split_name`` metric over seeds"""
    frame = metrics_frame([r for r in rows if r.split == split_name])
    if frame.empty:
        return pd.DataFrame(columns=["variant", "runs"])
    frame["column"] = [m if pd.isna(k) else f"{m}@{k}" for m, k in zip(frame["metric"], frame["k"])]
    variants = list(dict.fromkeys(frame["variant"]))
    columns = list(dict.fromkeys(frame["column"]))

    records = []
    for variant in variants:
        subset = frame[frame["variant"] == variant]
        record: dict[str, Any] = {"variant": variant, "runs": int(subset["seed"].nunique())}
        for column in columns:
            mean, std = aggregate(subset.loc[subset["column"] == column, "value"].tolist())
            record[column] = mean
            record[f"{column}_std"] = std
        records.append(record)
    return pd.DataFrame.from_records(records)


def write_summary_csv(path: str | Path, summary: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    return path


@dataclass
class TrainResult:
    """Best-validation model plus everything reported about it"""

    variant: str
    seed: int
    model: SequentialRecommender
    split: SplitCorpus
    test_report: EvalReport
    best_val: EvalReport
    best_epoch: int
    rms: tuple[float, float]
    rows: list[MetricRow] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def checkpoint_bytes(self) -> bytes:
        corpus = self.split.corpus
        return serialize_sr(self.model, list(corpus.app_names), list(corpus.poi_names))


class TrainingPipeline:
    """EI, freeze, relative encodings, then sequential training with validation"""

    def __init__(self, corpus: Corpus, config: RunConfig, variant: str = "full",
                 pretrained: PretrainedVectors | None = None, table: CategoryEmbeddingTable | None = None):
        self.corpus = corpus
        self.config = config
        self.variant = variant
        self.pretrained = pretrained
        self.table = table
        self.split = split(corpus)

    def _embedding_table(self) -> CategoryEmbeddingTable:
        if self.table is None:
            self.table = train_ei(self.corpus, self.config, self.split.train_checkins(), self.pretrained)
        return self.table

    def examples(self, model: SequentialRecommender) -> list[TrainingExample]:
        """Shifted train windows for every user with at least two train check-ins"""
        out = []
        for idx, user in enumerate(self.split.users):
            if len(user.train) < 2:
                continue
            inputs, targets = training_pair(user.train, self.config.seq_len, model.pad_id)
            out.append(TrainingExample(
                user=idx,
                inputs=model.encode(inputs, key=("train", idx)),
                targets=model.encode(targets, key=("target", idx)),
            ))
        return out

    def _validate(self, model: SequentialRecommender) -> EvalReport:
        return evaluate(model, self.split, eval_root(self.config.seed, "val"), K_LIST, phase="val")

    def _train_epoch(self, model: SequentialRecommender, examples: list[TrainingExample], optimizer: Adam,
                     epoch: int, rngs: Mapping[str, np.random.Generator]) -> float:
        cfg = self.config
        order = rngs["shuffle"].permutation(len(examples))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size), 1):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            targets = sample_targets(self.corpus, batch, model.table, rngs["negatives"], model.pad_id)
            try:
                loss = model.loss(batch, targets, train=True, rng=rngs["dropout"])
            except NumericError as e:
                raise TrainingError(f"sequential recommender diverged: {e}", epoch, b) from e
            value = loss.total.item()
            if not np.isfinite(value):
                raise TrainingError("sequential recommender loss is not finite", epoch, b)
            optimizer.step(backward(loss.total))
            epoch_loss += value
        return epoch_loss

    def run(self) -> TrainResult:
        cfg = self.config
        logger.info("pipeline_start", variant=self.variant, seed=cfg.seed, users=self.corpus.num_users,
                    pois=self.corpus.num_pois)
        table = self._embedding_table()
        model = SequentialRecommender(cfg, table, self.corpus.num_pois)
        examples = self.examples(model)
        if cfg.epochs_sr > 0 and not examples:
            raise UsageError("no user has two or more train check-ins to learn from")

        params = model.params.named()
        optimizer = Adam(model.params.trainable(), lr=cfg.lr_sr, beta1=cfg.beta1, beta2=cfg.beta2,
                         eps=cfg.adam_eps)
        rngs = {name: SeedUtils.rng(cfg.seed, f"sr.{name}") for name in ("shuffle", "negatives", "dropout")}

        rows: list[MetricRow] = []
        losses: list[float] = []
        best_val = self._validate(model)
        best_epoch = 0
        best_state = {name: t.data.copy() for name, t in params.items()}
        rows.extend(report_rows(best_val, self.variant, 0, cfg.seed))

        for epoch in range(1, cfg.epochs_sr + 1):
            epoch_loss = self._train_epoch(model, examples, optimizer, epoch, rngs)
            losses.append(epoch_loss)
            rows.append(MetricRow(self.variant, epoch, "train", "loss", None, epoch_loss, cfg.seed))

            val = self._validate(model)
            rows.extend(report_rows(val, self.variant, epoch, cfg.seed))
            score = val.metric(SELECTION_METRIC)
            logger.info("sr_epoch", epoch=epoch, loss=round(epoch_loss, 6), val_ndcg10=round(score, 6))
            if score > best_val.metric(SELECTION_METRIC):
                best_val, best_epoch = val, epoch
                best_state = {name: t.data.copy() for name, t in params.items()}

        for name, t in params.items():
            t.data = best_state[name]

        test = evaluate(model, self.split, eval_root(cfg.seed, "test"), K_LIST, phase="test")
        rows.extend(report_rows(test, self.variant, best_epoch, cfg.seed))
        rms = category_rms_probe(model, self.split)
        rows.append(MetricRow(self.variant, best_epoch, "test", "rms_app", None, rms[0], cfg.seed))
        rows.append(MetricRow(self.variant, best_epoch, "test", "rms_poi", None, rms[1], cfg.seed))
        logger.info("pipeline_done", variant=self.variant, best_epoch=best_epoch,
                    test_ndcg10=round(test.metric(SELECTION_METRIC), 6))

        return TrainResult(
            variant=self.variant,
            seed=cfg.seed,
            model=model,
            split=self.split,
            test_report=test,
            best_val=best_val,
            best_epoch=best_epoch,
            rms=rms,
            rows=rows,
            losses=losses,
        )


def train_pipeline(corpus: Corpus, config: RunConfig, variant: str = "full",
                   pretrained: PretrainedVectors | None = None) -> TrainResult:
    return TrainingPipeline(corpus, config, variant, pretrained).run()


def train_runs(corpus: Corpus, config: RunConfig, runs: int = 1,
               pretrained: PretrainedVectors | None = None) -> list[TrainResult]:
    """Repeat the pipeline with seeds derived from ``config.seed``"""
    if runs < 1:
        raise UsageError("runs must be >= 1")
    return [
        train_pipeline(corpus, config.variant(seed=seed), pretrained=pretrained)
        for seed in SeedUtils.run_seeds(config.seed, runs)
    ]


@dataclass
class AblationResult:
    grid: str
    results: list[TrainResult]

    @property
    def rows(self) -> list[MetricRow]:
        return [row for r in self.results for row in r.rows]

    def summary(self) -> pd.DataFrame:
        return summarize(self.rows, "test")


def run_ablation(corpus: Corpus, config: RunConfig, grid: str = "relative", runs: int = 1,
                 pretrained: PretrainedVectors | None = None) -> AblationResult:
    """Train every variant of ``grid`` for each derived seed

    The relative grid shares one EI table per seed, since its variants only
    differ downstream of the frozen tables.
    """
    if grid not in GRIDS:
        raise UsageError(f"unknown ablation grid {grid!r}; expected one of {sorted(GRIDS)}")
    if runs < 1:
        raise UsageError("runs must be >= 1")
    results = []
    for seed in SeedUtils.run_seeds(config.seed, runs):
        seeded = config.variant(seed=seed)
        shared: CategoryEmbeddingTable | None = None
        for name, changes in GRIDS[grid].items():
            variant_config = seeded.variant(**changes)
            pipeline = TrainingPipeline(corpus, variant_config, name, pretrained,
                                        table=shared if grid == "relative" else None)
            results.append(pipeline.run())
            if grid == "relative":
                shared = pipeline.table
    return AblationResult(grid=grid, results=results)
