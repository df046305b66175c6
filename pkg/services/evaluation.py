"""
Leave-one-out evaluation

Every user's last check-in is the test target and the second-last the
validation target. A target is ranked against up to ``eval_negatives``
distinct POIs the user never visited; ties count against the true item.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Literal, Protocol, Sequence

import numpy as np
import orjson
import structlog
from pydantic import BaseModel, Field

from models.models import CheckIn, Corpus, Window
from models.sampling import sample_negatives
from models.windowing import window
from services.metrics import K_LIST, pessimistic_rank, ranking_metrics, rms_distance
from services.relenc import EncodedWindow, net_embedding
from utils.config import Config, RunConfig
from utils.errors import SplitError

logger = structlog.get_logger(__name__)

Phase = Literal["val", "test"]


@dataclass(frozen=True)
class UserSplit:
    train: list[CheckIn]
    val: CheckIn
    test: CheckIn

    def history(self, phase: Phase) -> list[CheckIn]:
        """Check-ins visible when predicting the ``phase`` target"""
        return self.train if phase == "val" else self.train + [self.val]

    def target(self, phase: Phase) -> CheckIn:
        return self.val if phase == "val" else self.test


@dataclass(frozen=True)
class SplitCorpus:
    corpus: Corpus
    users: list[UserSplit]

    def train_checkins(self) -> list[CheckIn]:
        return [c for u in self.users for c in u.train]


def split(corpus: Corpus) -> SplitCorpus:
    """Train prefix, second-last check-in for validation, last for test"""
    users = []
    for uid, seq in zip(corpus.user_ids, corpus.users):
        if len(seq) < 3:
            raise SplitError(f"user {uid} has {len(seq)} check-ins; leave-one-out needs at least 3")
        users.append(UserSplit(train=list(seq[:-2]), val=seq[-2], test=seq[-1]))
    return SplitCorpus(corpus=corpus, users=users)


class RankingModel(Protocol):
    config: RunConfig

    @property
    def pad_id(self) -> int: ...

    def encode(self, window: Window, key: object = None) -> EncodedWindow: ...

    def score(self, encoded: EncodedWindow, candidates: Sequence[int] | np.ndarray) -> np.ndarray: ...


class EvalReport(BaseModel):
    """Averaged ranking metrics plus the per-user ranks they came from"""

    phase: str = "test"
    metrics: dict[str, float]
    ranks: list[int]
    negatives: list[int]
    k_list: list[int] = Field(default_factory=lambda: list(K_LIST))
    tie_break: str = "pessimistic"
    config: dict[str, Any] = Field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def num_users(self) -> int:
        return len(self.ranks)

    def metric(self, name: str, k: int | None = None) -> float:
        return self.metrics[name if k is None else f"{name}@{k}"]

    def to_json(self, include_ranks: bool = False) -> bytes:
        data = self.model_dump(exclude=None if include_ranks else {"ranks", "negatives"})
        return orjson.dumps(data, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2)


def _root_seed(rng: np.random.Generator | int) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63 - 1))
    return int(rng)


def evaluate(model: RankingModel, split_corpus: SplitCorpus, rng: np.random.Generator | int,
             k_list: Sequence[int] = K_LIST, phase: Phase = "test", workers: int | None = None) -> EvalReport:
    """Rank every user's ``phase`` target among sampled unvisited POIs"""
    started = time.perf_counter()
    config = model.config
    corpus = split_corpus.corpus
    root = _root_seed(rng)
    requested = config.eval_negatives
    workers = workers or max(config.eval_workers, Config.workers())

    encoded = [
        model.encode(window(u.history(phase), config.seq_len, model.pad_id), key=(phase, idx))
        for idx, u in enumerate(split_corpus.users)
    ]

    def rank_user(idx: int) -> tuple[int, int]:
        user_rng = np.random.default_rng([root, idx])
        negatives = sample_negatives(corpus, idx, user_rng, requested)
        if negatives.size < requested:
            logger.warning("eval_negatives_reduced", user=corpus.user_ids[idx], requested=requested,
                           actual=int(negatives.size))
        true_poi = split_corpus.users[idx].target(phase).poi_id
        scores = model.score(encoded[idx], np.concatenate([[true_poi], negatives]).astype(np.int64))
        return pessimistic_rank(scores[0], scores[1:]), int(negatives.size)

    indices = range(len(split_corpus.users))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(rank_user, indices))
    else:
        results = [rank_user(i) for i in indices]

    ranks = [r for r, _ in results]
    return EvalReport(
        phase=phase,
        metrics=ranking_metrics(ranks, k_list),
        ranks=ranks,
        negatives=[n for _, n in results],
        k_list=list(k_list),
        config=config.snapshot(),
        wall_clock=time.perf_counter() - started,
    )


def category_rms_probe(model: Any, split_corpus: SplitCorpus) -> tuple[float, float]:
    """RMS distance between the final user state and the next check-in's net app / POI embedding

    The state comes from the train + validation history; the next check-in is
    the test target. Lower is better.
    """
    if not split_corpus.users:
        return 0.0, 0.0
    config = model.config
    encoded = [
        model.encode(window(u.history("test"), config.seq_len, model.pad_id), key=("test", idx))
        for idx, u in enumerate(split_corpus.users)
    ]
    z = model.final_states(encoded)
    mu_app = np.stack([net_embedding(u.test.app_categories, model.table.A) for u in split_corpus.users])
    mu_poi = np.stack([net_embedding(u.test.poi_categories, model.table.S) for u in split_corpus.users])
    return rms_distance(z, mu_app), rms_distance(z, mu_poi)
