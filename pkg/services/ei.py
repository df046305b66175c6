"""
Embedding Initiator: phase-one training of the app and POI category tables

Two channels share the tables. The co-occurrence channel scores (app, poi)
category pairs with a small head over the concatenated embeddings and
contrasts each true pair with one sampled app negative and one sampled POI
negative. The alignment channel pulls every category row toward a learned
projection of a fixed external vector for that category's name.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import structlog

from models.models import CheckIn, Corpus
from models.sampling import sample_excluding
from numcore import ops
from numcore.optim import Adam
from numcore.tensor import Tensor, backward, no_grad
from utils.config import RunConfig
from utils.errors import CorpusFormatError, NumericError, PretrainedVectorError, TrainingError
from utils.seeding import SeedUtils

logger = structlog.get_logger(__name__)

# Positive start for the MF bias keeps the ReLU head out of its flat region
MF_BIAS_INIT = 0.1


def fallback_vector(name: str, dim: int) -> np.ndarray:
    """Deterministic unit-norm stand-in for a missing pretrained vector"""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class AlignmentTargets:
    """Pretrained vectors stacked in category-id order"""

    app: np.ndarray
    poi: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.app.shape[1])


class PretrainedVectors:
    """Fixed external vectors keyed by category name"""

    def __init__(self, vectors: dict[str, np.ndarray] | None = None, dim: int = 768,
                 allow_fallback: bool = True):
        self.dim = dim
        self.allow_fallback = allow_fallback
        self.vectors: dict[str, np.ndarray] = {}
        for name, vec in (vectors or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise CorpusFormatError(f"pretrained vector {name!r} has shape {vec.shape}, expected ({dim},)")
            self.vectors[name] = vec
        self.fallbacks_used = 0

    @classmethod
    def load(cls, path: str | Path, dim: int = 768, allow_fallback: bool = True) -> "PretrainedVectors":
        """Read ``name<TAB>floats`` lines; blank lines and '#' comments are skipped"""
        vectors: dict[str, np.ndarray] = {}
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise CorpusFormatError(f"cannot read pretrained vectors {path}: {e}") from e
        for lineno, raw in enumerate(lines, 1):
            if not raw.strip() or raw.startswith("#"):
                continue
            if "\t" not in raw:
                raise CorpusFormatError("expected 'name<TAB>values'", lineno)
            name, rest = raw.split("\t", 1)
            try:
                values = np.array(rest.split(), dtype=np.float64)
            except ValueError:
                raise CorpusFormatError(f"non-numeric value in vector for {name!r}", lineno) from None
            if values.shape != (dim,):
                raise CorpusFormatError(f"vector for {name!r} has {values.size} values, expected {dim}", lineno)
            vectors[name] = values
        logger.info("pretrained_vectors_loaded", path=str(path), count=len(vectors), dim=dim)
        return cls(vectors, dim, allow_fallback)

    def lookup(self, name: str) -> np.ndarray:
        vec = self.vectors.get(name)
        if vec is not None:
            return vec
        if not self.allow_fallback:
            raise PretrainedVectorError(f"no pretrained vector for category {name!r} and fallback is disabled")
        self.fallbacks_used += 1
        return fallback_vector(name, self.dim)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.zeros((0, self.dim))
        return np.stack([self.lookup(n) for n in names])

    def targets(self, corpus: Corpus) -> AlignmentTargets:
        return AlignmentTargets(app=self.matrix(corpus.app_names), poi=self.matrix(corpus.poi_names))


@dataclass
class CategoryEmbeddingTable:
    A: Tensor
    S: Tensor

    @property
    def dim(self) -> int:
        return int(self.A.shape[1])

    @property
    def frozen(self) -> bool:
        return not (self.A.requires_grad or self.S.requires_grad)

    def freeze(self) -> "CategoryEmbeddingTable":
        self.A.requires_grad = False
        self.S.requires_grad = False
        return self

    @classmethod
    def init(cls, num_app: int, num_poi: int, dim: int, seed: int) -> "CategoryEmbeddingTable":
        scale = 1.0 / np.sqrt(dim)
        return cls(
            A=Tensor(SeedUtils.rng(seed, "ei.A").normal(0.0, scale, (num_app, dim)), requires_grad=True, name="ei.A"),
            S=Tensor(SeedUtils.rng(seed, "ei.S").normal(0.0, scale, (num_poi, dim)), requires_grad=True, name="ei.S"),
        )


@dataclass
class EIParams:
    """MF head (w_v, b_v) and the two alignment projections (w1, b1), (w2, b2)"""

    w_v: Tensor
    b_v: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w_v, self.b_v, self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def init(cls, dim: int, ext_dim: int, seed: int) -> "EIParams":
        def weight(name: str, shape: tuple[int, int]) -> Tensor:
            data = SeedUtils.rng(seed, name).normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            return Tensor(data, requires_grad=True, name=name)

        return cls(
            w_v=weight("ei.w_v", (2 * dim, 1)),
            b_v=Tensor(np.full(1, MF_BIAS_INIT), requires_grad=True, name="ei.b_v"),
            w1=weight("ei.w1", (ext_dim, dim)),
            b1=Tensor(np.zeros(dim), requires_grad=True, name="ei.b1"),
            w2=weight("ei.w2", (ext_dim, dim)),
            b2=Tensor(np.zeros(dim), requires_grad=True, name="ei.b2"),
        )


def mf_logit(a: np.ndarray | int, s: np.ndarray | int, table: CategoryEmbeddingTable, params: EIParams,
             activation: str = "relu") -> Tensor:
    """ReLU(w_v (a || s) + b_v) for each (a, s) pair; scalar ids give a scalar"""
    a_ids = np.asarray(a, dtype=np.int64)
    s_ids = np.asarray(s, dtype=np.int64)
    pair = ops.concat([ops.embedding(table.A, a_ids.reshape(-1)), ops.embedding(table.S, s_ids.reshape(-1))])
    logit = ops.reshape(ops.add(ops.matmul(pair, params.w_v), params.b_v), a_ids.shape)
    return ops.relu(logit) if activation == "relu" else logit


def _true_pairs(batch: Sequence[CheckIn]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    apps, pois, owner = [], [], []
    for k, c in enumerate(batch):
        for a in sorted(c.app_categories):
            for s in sorted(c.poi_categories):
                apps.append(a)
                pois.append(s)
                owner.append(k)
    return np.array(apps, dtype=np.int64), np.array(pois, dtype=np.int64), owner


def loss_mf(batch: Sequence[CheckIn], table: CategoryEmbeddingTable, params: EIParams,
            rng: np.random.Generator, activation: str = "relu") -> Tensor:
    """-sum over true pairs of [log s(v(a,s)) + log(1 - s(v(a,s'))) + log(1 - s(v(a',s)))]"""
    apps, pois, owner = _true_pairs(batch)
    if apps.size == 0:
        return Tensor(0.0)
    n_a, n_s = table.A.shape[0], table.S.shape[0]
    neg_pois = np.empty_like(pois)
    neg_apps = np.empty_like(apps)
    for i, k in enumerate(owner):
        neg_pois[i] = sample_excluding(batch[k].poi_categories, n_s, rng)
        neg_apps[i] = sample_excluding(batch[k].app_categories, n_a, rng)

    positive = ops.log_sigmoid(mf_logit(apps, pois, table, params, activation))
    wrong_poi = ops.log_sigmoid(ops.scalar_mul(mf_logit(apps, neg_pois, table, params, activation), -1.0))
    wrong_app = ops.log_sigmoid(ops.scalar_mul(mf_logit(neg_apps, pois, table, params, activation), -1.0))
    return ops.scalar_mul(ops.total(ops.add(ops.add(positive, wrong_poi), wrong_app)), -1.0)


def project(vectors: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """ReLU(B w + b) for a stack of pretrained vectors"""
    return ops.relu(ops.add(ops.matmul(Tensor(vectors), w), b))


def loss_bert(batch: Sequence[CheckIn], table: CategoryEmbeddingTable, pretrained: AlignmentTargets,
              params: EIParams) -> Tensor:
    """(1/|batch|) * sum over true pairs of ||a - P1(a)||^2 + ||s - P2(s)||^2

    Each projection is computed once per distinct category in the batch.
    """
    apps, pois, _ = _true_pairs(batch)
    if apps.size == 0:
        return Tensor(0.0)
    app_ids, app_pos = np.unique(apps, return_inverse=True)
    poi_ids, poi_pos = np.unique(pois, return_inverse=True)
    phi_app = project(pretrained.app[app_ids], params.w1, params.b1)
    phi_poi = project(pretrained.poi[poi_ids], params.w2, params.b2)
    app_term = ops.squared_error(ops.embedding(table.A, apps), ops.embedding(phi_app, app_pos.reshape(-1)))
    poi_term = ops.squared_error(ops.embedding(table.S, pois), ops.embedding(phi_poi, poi_pos.reshape(-1)))
    return ops.scalar_mul(ops.total(ops.add(app_term, poi_term)), 1.0 / len(batch))


def loss_ei(batch: Sequence[CheckIn], table: CategoryEmbeddingTable, pretrained: AlignmentTargets,
            params: EIParams, gamma: float, rng: np.random.Generator,
            activation: str = "relu") -> tuple[Tensor, Tensor, Tensor]:
    """gamma * L_MF + (1 - gamma) * L_Bert, returned with both parts"""
    mf = loss_mf(batch, table, params, rng, activation)
    bert = loss_bert(batch, table, pretrained, params)
    return ops.add(ops.scalar_mul(mf, gamma), ops.scalar_mul(bert, 1.0 - gamma)), mf, bert


class EmbeddingInitiator:
    """Trains the category tables and hands them over frozen"""

    def __init__(self, config: RunConfig, corpus: Corpus, pretrained: PretrainedVectors | None = None):
        self.config = config
        self.corpus = corpus
        if pretrained is None:
            if config.pretrained_path:
                pretrained = PretrainedVectors.load(
                    config.pretrained_path, config.pretrained_dim, config.allow_fallback_vectors
                )
            else:
                pretrained = PretrainedVectors(dim=config.pretrained_dim, allow_fallback=config.allow_fallback_vectors)
        self.pretrained = pretrained
        self.targets = pretrained.targets(corpus)
        self.table = CategoryEmbeddingTable.init(
            corpus.num_app_categories, corpus.num_poi_categories, config.dim, config.seed
        )
        self.params = EIParams.init(config.dim, pretrained.dim, config.seed)
        self.history: list[dict[str, float]] = []

    def loss(self, batch: Sequence[CheckIn], rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
        return loss_ei(batch, self.table, self.targets, self.params, self.config.gamma, rng,
                       self.config.mf_activation)

    def train(self, checkins: Sequence[CheckIn]) -> CategoryEmbeddingTable:
        cfg = self.config
        rng = SeedUtils.rng(cfg.seed, "ei.train")
        trainable = [self.table.A, self.table.S, *self.params.tensors()]
        optimizer = Adam(trainable, lr=cfg.lr_ei, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        if self.pretrained.fallbacks_used:
            logger.info("pretrained_fallback", categories=self.pretrained.fallbacks_used)

        previous: float | None = None
        for epoch in range(1, cfg.epochs_ei + 1):
            order = rng.permutation(len(checkins))
            totals = {"loss": 0.0, "mf": 0.0, "bert": 0.0}
            for b, start in enumerate(range(0, len(order), cfg.batch_size_ei), 1):
                batch = [checkins[i] for i in order[start:start + cfg.batch_size_ei]]
                try:
                    loss, mf, bert = self.loss(batch, rng)
                except NumericError as e:
                    raise TrainingError(f"embedding initiator diverged: {e}", epoch, b) from e
                if not np.isfinite(loss.item()):
                    raise TrainingError("embedding initiator loss is not finite", epoch, b)
                if loss.requires_grad:
                    optimizer.step(backward(loss))
                totals["loss"] += loss.item()
                totals["mf"] += mf.item()
                totals["bert"] += bert.item()

            self.history.append({"epoch": epoch, **totals})
            logger.info("ei_epoch", epoch=epoch, **{k: round(v, 6) for k, v in totals.items()})
            current = totals["loss"]
            if previous is not None and previous != 0.0:
                improvement = (previous - current) / abs(previous)
                if 0.0 <= improvement < cfg.ei_tolerance:
                    logger.info("ei_converged", epoch=epoch, improvement=improvement)
                    break
            previous = current

        for t in self.params.tensors():
            t.requires_grad = False
        return self.table.freeze()

    def logit(self, a: int, s: int) -> float:
        with no_grad():
            return mf_logit(a, s, self.table, self.params, self.config.mf_activation).item()


def train_ei(corpus: Corpus, config: RunConfig, checkins: Sequence[CheckIn] | None = None,
             pretrained: PretrainedVectors | None = None) -> CategoryEmbeddingTable:
    """Run the embedding initiator on ``checkins`` (default: every check-in in the corpus)"""
    if checkins is None:
        checkins = [c for seq in corpus.users for c in seq]
    return EmbeddingInitiator(config, corpus, pretrained).train(checkins)
