"""
Sequential Recommender: causal self-attention over check-in windows

Each block is pre-layer-norm with two residual sub-layers:

    z <- z + dropout(Attn(LN(z)))
    z <- z + dropout(PFFN(LN(z)))

Attention adds the absolute key table and the J/K/T relative key tables on
the key side only. The value side adds the absolute value table, the net
category embedding of each key slot and the relative value tables. Queries
see only real slots at or before their own position.

Two kernels compute the relative terms. ``dense`` materialises N x N x D
stacks by table lookup. ``bucketed`` (the default) scores queries against
the whole table and gathers by index on the key side, and on the value side
sums attention weights per bucket before multiplying by the table, which
never builds the N x N x D stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import structlog

from models.models import Corpus, Window
from models.sampling import sample_category_set, sample_negative
from numcore import ops
from numcore.tensor import Tensor, no_grad
from services.ei import CategoryEmbeddingTable
from services.relenc import EncodedWindow, RelativeEncoder
from utils.config import RunConfig
from utils.errors import UsageError
from utils.seeding import SeedUtils

logger = structlog.get_logger(__name__)

CHANNELS = ("J", "K", "T")


def channel_enabled(config: RunConfig, channel: str) -> bool:
    return {"J": config.use_J, "K": config.use_K, "T": config.use_T}[channel]


def channel_clip(config: RunConfig, channel: str) -> int:
    return {"J": config.clip_app, "K": config.clip_poi, "T": config.clip_time}[channel]


@dataclass
class BlockParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    ln_attn_scale: Tensor
    ln_attn_bias: Tensor
    ln_ffn_scale: Tensor
    ln_ffn_bias: Tensor
    w_p1: Tensor
    b_p1: Tensor
    w_p2: Tensor
    b_p2: Tensor

    FIELDS = ("W_q", "W_k", "W_v", "ln_attn_scale", "ln_attn_bias", "ln_ffn_scale", "ln_ffn_bias",
              "w_p1", "b_p1", "w_p2", "b_p2")

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in self.FIELDS}


@dataclass
class ModelParams:
    """Every trainable tensor of the recommender; disabled channels have no tables"""

    L: Tensor
    blocks: list[BlockParams]
    P_key: Tensor | None = None
    P_val: Tensor | None = None
    relative: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    @property
    def pad_id(self) -> int:
        return self.L.shape[0] - 1

    def named(self) -> dict[str, Tensor]:
        out = {"L": self.L}
        if self.P_key is not None and self.P_val is not None:
            out["P_key"] = self.P_key
            out["P_val"] = self.P_val
        for ch in CHANNELS:
            if ch in self.relative:
                out[f"{ch}_key"], out[f"{ch}_val"] = self.relative[ch]
        for r, block in enumerate(self.blocks):
            out.update(block.named(f"block{r}"))
        return out

    def trainable(self) -> list[Tensor]:
        return [t for t in self.named().values() if t.requires_grad]

    def regularized(self) -> list[Tensor]:
        """Tensors under the L2 penalty: everything trainable except layer-norm scale and bias"""
        return [t for name, t in self.named().items() if t.requires_grad and ".ln_" not in name]

    @classmethod
    def expected_shapes(cls, config: RunConfig, num_pois: int) -> dict[str, tuple[int, ...]]:
        d, n, d_ff = config.dim, config.seq_len, config.ffn_dim
        shapes: dict[str, tuple[int, ...]] = {"L": (num_pois + 1, d)}
        if config.use_abs:
            shapes["P_key"] = shapes["P_val"] = (n, d)
        for ch in CHANNELS:
            if channel_enabled(config, ch):
                # one table per channel, read by every head
                shapes[f"{ch}_key"] = shapes[f"{ch}_val"] = (channel_clip(config, ch) + 1, d // config.heads)
        for r in range(config.num_blocks):
            shapes.update({
                f"block{r}.W_q": (d, d), f"block{r}.W_k": (d, d), f"block{r}.W_v": (d, d),
                f"block{r}.ln_attn_scale": (d,), f"block{r}.ln_attn_bias": (d,),
                f"block{r}.ln_ffn_scale": (d,), f"block{r}.ln_ffn_bias": (d,),
                f"block{r}.w_p1": (d, d_ff), f"block{r}.b_p1": (d_ff,),
                f"block{r}.w_p2": (d_ff, d), f"block{r}.b_p2": (d,),
            })
        return shapes

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: RunConfig) -> "ModelParams":
        """Assemble from named arrays (all marked trainable)"""
        t = {name: Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
             for name, value in arrays.items()}
        blocks = [
            BlockParams(**{f: t[f"block{r}.{f}"] for f in BlockParams.FIELDS})
            for r in range(config.num_blocks)
        ]
        relative = {ch: (t[f"{ch}_key"], t[f"{ch}_val"]) for ch in CHANNELS if f"{ch}_key" in t}
        return cls(L=t["L"], blocks=blocks, P_key=t.get("P_key"), P_val=t.get("P_val"), relative=relative)

    @classmethod
    def init(cls, config: RunConfig, num_pois: int, seed: int) -> "ModelParams":
        """Seeded per tensor name, so the values of a tensor never depend on which others exist"""
        d = config.dim
        arrays: dict[str, np.ndarray] = {}
        for name, shape in cls.expected_shapes(config, num_pois).items():
            rng = SeedUtils.rng(seed, f"sr.{name}")
            leaf = name.split(".")[-1]
            if leaf.startswith("ln_") and leaf.endswith("scale"):
                arrays[name] = np.ones(shape)
            elif leaf.startswith(("ln_", "b_")):
                arrays[name] = np.zeros(shape)
            elif name == "L":
                table = rng.normal(0.0, 1.0 / np.sqrt(d), shape)
                table[-1] = 0.0
                arrays[name] = table
            elif name.startswith(("P_",) + tuple(f"{ch}_" for ch in CHANNELS)):
                arrays[name] = rng.normal(0.0, 0.1 / np.sqrt(d), shape)
            else:
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        return cls.from_arrays(arrays, config)


@dataclass
class SRBatch:
    """Stacked model inputs for B windows of length N"""

    poi_ids: np.ndarray
    pad_mask: np.ndarray
    indices: dict[str, np.ndarray]
    mu_bar: np.ndarray

    @property
    def size(self) -> int:
        return int(self.poi_ids.shape[0])

    @classmethod
    def stack(cls, encoded: Sequence[EncodedWindow]) -> "SRBatch":
        if not encoded:
            raise UsageError("empty batch")
        return cls(
            poi_ids=np.stack([e.window.poi_ids for e in encoded]),
            pad_mask=np.stack([e.window.pad_mask for e in encoded]),
            indices={ch: np.stack([e.rel.channel(ch) for e in encoded]) for ch in CHANNELS},
            mu_bar=np.stack([e.net.combined for e in encoded]),
        )

    def admissible(self) -> np.ndarray:
        """(B, 1, N, N) mask: causal, real query and real key"""
        n = self.poi_ids.shape[1]
        causal = np.tril(np.ones((n, n), dtype=bool))
        real = self.pad_mask
        return (causal[None] & real[:, :, None] & real[:, None, :])[:, None]


@dataclass
class SRTargets:
    """Next-check-in targets and one sampled negative per real position"""

    pos_ids: np.ndarray
    neg_ids: np.ndarray
    mask: np.ndarray
    app_pos: np.ndarray
    app_neg: np.ndarray
    app_neg_mask: np.ndarray
    poi_pos: np.ndarray
    poi_neg: np.ndarray
    poi_neg_mask: np.ndarray


@dataclass
class ForwardContext:
    batch: SRBatch
    mask: np.ndarray
    mu_bar: Tensor
    heads: int
    kernel: str
    dropout: float
    ln_eps: float
    train: bool
    rng: np.random.Generator | None

    @classmethod
    def build(cls, batch: SRBatch, config: RunConfig, train: bool = False,
              rng: np.random.Generator | None = None) -> "ForwardContext":
        return cls(
            batch=batch,
            mask=batch.admissible(),
            mu_bar=Tensor(batch.mu_bar),
            heads=config.heads,
            kernel=config.relative_kernel,
            dropout=config.dropout,
            ln_eps=config.ln_eps,
            train=train,
            rng=rng,
        )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def retrieve_relative(indices: dict[str, np.ndarray], params: ModelParams) -> dict[str, tuple[Tensor, Tensor]]:
    """Key and value encoding stacks: entry (.., i, j, :) is the table row at index (.., i, j)"""
    return {
        ch: (ops.embedding(key, indices[ch]), ops.embedding(val, indices[ch]))
        for ch, (key, val) in params.relative.items()
    }


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor, eps: float) -> Tensor:
    return ops.add(ops.mul(ops.layer_norm(x, eps), scale), bias)


def _keys(h: Tensor, block: BlockParams, params: ModelParams) -> Tensor:
    k = ops.matmul(h, block.W_k)
    return k if params.P_key is None else ops.add(k, params.P_key)


def _values(h: Tensor, block: BlockParams, params: ModelParams, ctx: ForwardContext) -> Tensor:
    v = ops.add(ops.matmul(h, block.W_v), ctx.mu_bar)
    return v if params.P_val is None else ops.add(v, params.P_val)


def attention_scores(h: Tensor, block: BlockParams, params: ModelParams, ctx: ForwardContext) -> Tensor:
    """Scaled compatibility scores (B, H, N, N) before masking"""
    q = _split_heads(ops.matmul(h, block.W_q), ctx.heads)
    k = _keys(h, block, params)
    scores = ops.matmul(q, ops.transpose(_split_heads(k, ctx.heads), (0, 1, 3, 2)))
    if params.relative:
        if ctx.kernel == "dense":
            stacks = retrieve_relative(ctx.batch.indices, params)
            for ch in CHANNELS:
                if ch in stacks:
                    scores = ops.add(scores, ops.einsum("bhid,bijd->bhij", q, stacks[ch][0]))
        else:
            for ch in CHANNELS:
                if ch in params.relative:
                    by_bucket = ops.matmul(q, ops.transpose(params.relative[ch][0], (1, 0)))
                    scores = ops.add(scores, ops.gather_last(by_bucket, ctx.batch.indices[ch][:, None]))
    return ops.scalar_mul(scores, 1.0 / np.sqrt(h.shape[-1] // ctx.heads))


def attention_output(alpha: Tensor, h: Tensor, block: BlockParams, params: ModelParams,
                     ctx: ForwardContext) -> Tensor:
    """Attention-weighted sum of the value vectors, (B, N, D)"""
    v = _values(h, block, params, ctx)
    out = ops.matmul(alpha, _split_heads(v, ctx.heads))
    if params.relative:
        if ctx.kernel == "dense":
            stacks = retrieve_relative(ctx.batch.indices, params)
            for ch in CHANNELS:
                if ch in stacks:
                    out = ops.add(out, ops.einsum("bhij,bijd->bhid", alpha, stacks[ch][1]))
        else:
            for ch in CHANNELS:
                if ch in params.relative:
                    table = params.relative[ch][1]
                    weights = ops.scatter_last(alpha, ctx.batch.indices[ch][:, None], table.shape[0])
                    out = ops.add(out, ops.matmul(weights, table))
    return _merge_heads(out)


def attention(h: Tensor, block: BlockParams, params: ModelParams, ctx: ForwardContext) -> tuple[Tensor, Tensor]:
    alpha = ops.softmax(attention_scores(h, block, params, ctx), ctx.mask)
    return attention_output(alpha, h, block, params, ctx), alpha


def pffn(x: Tensor, block: BlockParams) -> Tensor:
    inner = ops.relu(ops.add(ops.matmul(x, block.w_p1), block.b_p1))
    return ops.add(ops.matmul(inner, block.w_p2), block.b_p2)


def block_forward(z: Tensor, block: BlockParams, params: ModelParams, ctx: ForwardContext) -> Tensor:
    h = layer_norm(z, block.ln_attn_scale, block.ln_attn_bias, ctx.ln_eps)
    attended, _ = attention(h, block, params, ctx)
    z = ops.add(z, ops.dropout(attended, ctx.dropout, ctx.rng, ctx.train))
    h = layer_norm(z, block.ln_ffn_scale, block.ln_ffn_bias, ctx.ln_eps)
    return ops.add(z, ops.dropout(pffn(h, block), ctx.dropout, ctx.rng, ctx.train))


def forward(params: ModelParams, ctx: ForwardContext) -> Tensor:
    """Final-block outputs z, (B, N, D)"""
    batch = ctx.batch
    z = ops.mul(ops.embedding(params.L, batch.poi_ids), Tensor(batch.pad_mask[..., None].astype(np.float64)))
    for block in params.blocks:
        z = block_forward(z, block, params, ctx)
    return z


def predict_scores(z: Tensor, candidates: Sequence[int] | np.ndarray, params: ModelParams) -> Tensor:
    """z . L[c] for each candidate c; z is one query output (D,) or a stack (B, D)"""
    ids = np.asarray(candidates, dtype=np.int64)
    if ids.size and (ids == params.pad_id).any():
        raise UsageError("the pad POI cannot be a candidate")
    rows = ops.embedding(params.L, ids)
    if z.ndim == 1:
        return ops.dot(rows, z)
    return ops.matmul(z, ops.transpose(rows, (1, 0)))


@dataclass
class SRLoss:
    total: Tensor
    rec: Tensor
    app: Tensor
    poi: Tensor


def _bce(pos: Tensor, neg: Tensor, mask: np.ndarray, neg_mask: np.ndarray | None = None) -> Tensor:
    """-sum mask * (log s(pos) + log(1 - s(neg)))"""
    neg_term = ops.log_sigmoid(ops.scalar_mul(neg, -1.0))
    if neg_mask is not None:
        neg_term = ops.mul(neg_term, Tensor(neg_mask.astype(np.float64)))
    per_slot = ops.add(ops.log_sigmoid(pos), neg_term)
    return ops.scalar_mul(ops.total(ops.mul(per_slot, Tensor(mask.astype(np.float64)))), -1.0)


def loss_sr(params: ModelParams, batch: SRBatch, targets: SRTargets, config: RunConfig,
            train: bool = False, rng: np.random.Generator | None = None) -> SRLoss:
    """L_Rec + kappa (L_App + L_POI), with the L2 penalty inside L_Rec"""
    z = forward(params, ForwardContext.build(batch, config, train, rng))
    pos = ops.dot(z, ops.embedding(params.L, targets.pos_ids))
    neg = ops.dot(z, ops.embedding(params.L, targets.neg_ids))
    rec = _bce(pos, neg, targets.mask)
    if config.l2 > 0:
        rec = ops.add(rec, ops.scalar_mul(ops.frobenius_sq(params.regularized()), config.l2))

    app = _bce(ops.dot(z, Tensor(targets.app_pos)), ops.dot(z, Tensor(targets.app_neg)),
               targets.mask, targets.app_neg_mask)
    poi = _bce(ops.dot(z, Tensor(targets.poi_pos)), ops.dot(z, Tensor(targets.poi_neg)),
               targets.mask, targets.poi_neg_mask)
    total = ops.add(rec, ops.scalar_mul(ops.add(app, poi), config.kappa))
    return SRLoss(total=total, rec=rec, app=app, poi=poi)


@dataclass(frozen=True)
class TrainingExample:
    """One user's input window and aligned next-check-in targets"""

    user: int
    inputs: EncodedWindow
    targets: EncodedWindow


def sample_targets(corpus: Corpus, examples: Sequence[TrainingExample], table: CategoryEmbeddingTable,
                   rng: np.random.Generator, pad_id: int) -> SRTargets:
    """Draw one POI negative and one unused category set per real target slot"""
    b = len(examples)
    n = examples[0].targets.window.length
    d = table.dim
    pos_ids = np.stack([ex.targets.window.poi_ids for ex in examples])
    mask = np.stack([ex.targets.window.pad_mask for ex in examples])
    neg_ids = np.full((b, n), pad_id, dtype=np.int64)
    app_neg = np.zeros((b, n, d))
    poi_neg = np.zeros((b, n, d))
    app_neg_mask = np.zeros((b, n), dtype=bool)
    poi_neg_mask = np.zeros((b, n), dtype=bool)
    A, S = table.A.data, table.S.data

    for i, ex in enumerate(examples):
        target = ex.targets.window
        for k in np.flatnonzero(target.pad_mask):
            neg_ids[i, k] = sample_negative(corpus, ex.user, rng)
            used_app = target.app_categories[k]
            apps = sample_category_set(used_app, A.shape[0], len(used_app), rng)
            if apps.size:
                app_neg[i, k] = A[apps].mean(axis=0)
                app_neg_mask[i, k] = True
            used_poi = target.poi_categories[k]
            pois = sample_category_set(used_poi, S.shape[0], len(used_poi), rng)
            if pois.size:
                poi_neg[i, k] = S[pois].mean(axis=0)
                poi_neg_mask[i, k] = True

    return SRTargets(
        pos_ids=pos_ids,
        neg_ids=neg_ids,
        mask=mask,
        app_pos=np.stack([ex.targets.net.mu_app for ex in examples]),
        app_neg=app_neg,
        app_neg_mask=app_neg_mask,
        poi_pos=np.stack([ex.targets.net.mu_poi for ex in examples]),
        poi_neg=poi_neg,
        poi_neg_mask=poi_neg_mask,
    )


@dataclass
class Recommendation:
    pois: list[tuple[int, float]]
    app_categories: list[tuple[int, float]]
    poi_categories: list[tuple[int, float]]


def _top(scores: np.ndarray, k: int, exclude: int | None = None) -> list[tuple[int, float]]:
    order = np.lexsort((np.arange(scores.size), -scores))
    picked = [int(i) for i in order if i != exclude][:k]
    return [(i, float(scores[i])) for i in picked]


class SequentialRecommender:
    """Recommender parameters bound to the frozen category tables"""

    def __init__(self, config: RunConfig, table: CategoryEmbeddingTable, num_pois: int,
                 params: ModelParams | None = None):
        if not table.frozen:
            raise UsageError("the category tables must be frozen before sequential training")
        self.config = config
        self.table = table
        self.num_pois = num_pois
        self.params = params or ModelParams.init(config, num_pois, config.seed)
        self.encoder = RelativeEncoder(table, config)

    @property
    def pad_id(self) -> int:
        return self.num_pois

    def loss(self, examples: Sequence[TrainingExample], targets: SRTargets, train: bool = False,
             rng: np.random.Generator | None = None) -> SRLoss:
        batch = SRBatch.stack([ex.inputs for ex in examples])
        return loss_sr(self.params, batch, targets, self.config, train, rng)

    def encode(self, window: Window, key: object = None) -> EncodedWindow:
        return self.encoder.encode(window, key)

    def final_states(self, encoded: Sequence[EncodedWindow]) -> np.ndarray:
        """Output at the last slot of each window, (B, D)"""
        chunks = []
        size = self.config.batch_size
        with no_grad():
            for start in range(0, len(encoded), size):
                batch = SRBatch.stack(encoded[start:start + size])
                chunks.append(forward(self.params, ForwardContext.build(batch, self.config)).data[:, -1, :])
        return np.concatenate(chunks) if chunks else np.zeros((0, self.config.dim))

    def score(self, encoded: EncodedWindow, candidates: Sequence[int] | np.ndarray) -> np.ndarray:
        z_last = self.final_states([encoded])[0]
        with no_grad():
            return predict_scores(Tensor(z_last), candidates, self.params).data

    def recommend(self, window: Window, top: int = 10) -> Recommendation:
        """Top POIs (pad excluded) plus the most likely next app and POI categories"""
        z_last = self.final_states([self.encoder.encode(window)])[0]
        return Recommendation(
            pois=_top(self.params.L.data @ z_last, top, exclude=self.pad_id),
            app_categories=_top(self.table.A.data @ z_last, top),
            poi_categories=_top(self.table.S.data @ z_last, top),
        )
