"""
Relative encodings between the check-ins of one window

For every window we compute the net app and POI category embeddings (the
mean of the frozen category rows attached to each check-in) and three
integer matrices: J from app-embedding cosine distance, K from POI-embedding
cosine distance and T from time gaps. Entries are bucketed into
[0, clip] so they can index the relative embedding tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Iterable

import numpy as np

from models.models import Window
from numcore.tensor import Tensor
from services.ei import CategoryEmbeddingTable
from utils.config import RunConfig
from utils.errors import UsageError

TIME_MODES = ("clipped_quotient", "literal")


@dataclass(frozen=True)
class NetCategoryEmbeddings:
    mu_app: np.ndarray
    mu_poi: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        """mu_app + mu_poi, the value-side category term"""
        return self.mu_app + self.mu_poi


@dataclass(frozen=True)
class RelativeIndexMatrices:
    J: np.ndarray
    K: np.ndarray
    T: np.ndarray
    clip_app: int
    clip_poi: int
    clip_time: int

    def channel(self, name: str) -> np.ndarray:
        return {"J": self.J, "K": self.K, "T": self.T}[name]

    def clip(self, name: str) -> int:
        return {"J": self.clip_app, "K": self.clip_poi, "T": self.clip_time}[name]


@dataclass(frozen=True)
class EncodedWindow:
    """A window with everything the recommender reads from the frozen tables"""

    window: Window
    net: NetCategoryEmbeddings
    rel: RelativeIndexMatrices


def _rows(table: Tensor | np.ndarray) -> np.ndarray:
    return table.data if isinstance(table, Tensor) else np.asarray(table)


def net_embedding(cat_ids: AbstractSet[int] | Iterable[int], table: Tensor | np.ndarray) -> np.ndarray:
    """Arithmetic mean of the table rows for a nonempty set of category ids"""
    rows = _rows(table)
    ids = sorted(set(cat_ids))
    if not ids:
        raise UsageError("net embedding of an empty category set")
    if ids[0] < 0 or ids[-1] >= rows.shape[0]:
        raise UsageError(f"category id out of range [0, {rows.shape[0]})")
    return rows[ids].mean(axis=0)


def net_embeddings(window: Window, table: CategoryEmbeddingTable) -> NetCategoryEmbeddings:
    n, d = window.length, table.dim
    mu_app = np.zeros((n, d))
    mu_poi = np.zeros((n, d))
    for k in np.flatnonzero(window.pad_mask):
        mu_app[k] = net_embedding(window.app_categories[k], table.A)
        mu_poi[k] = net_embedding(window.poi_categories[k], table.S)
    return NetCategoryEmbeddings(mu_app=mu_app, mu_poi=mu_poi)


def _prefix_index(n: int) -> np.ndarray:
    """Entry (i, j) is max(i, j): the last slot whose statistics scale that entry"""
    idx = np.arange(n)
    return np.maximum.outer(idx, idx)


def cosine_variance_matrix(mu: np.ndarray, clip: int, pad_mask: np.ndarray) -> np.ndarray:
    """floor((f - min_f) / (max_f - min_f) * clip) with f = 1 - cosine similarity

    Entry (i, j) takes min_f/max_f over the real, nonzero slots up to
    max(i, j), self-pairs included, so min_f is 0 and a check-in never
    rescales the entries between the check-ins before it. A zero vector has
    similarity 0 with everything but never enters the statistics.
    """
    if clip < 1:
        raise UsageError("clip constant must be >= 1")
    n = mu.shape[0]
    out = np.zeros((n, n), dtype=np.int64)
    norms = np.linalg.norm(mu, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(mu)
    unit[nonzero] = mu[nonzero] / norms[nonzero, None]

    f = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    f = 0.5 * (f + f.T)
    np.fill_diagonal(f, 0.0)

    real = np.asarray(pad_mask, dtype=bool)
    stats = real & nonzero
    if not stats.any():
        return out
    # f is symmetric, so the max over the leading m x m block is a running max of lower-triangle rows
    hi = np.maximum.accumulate(np.tril(np.where(np.outer(stats, stats), f, 0.0)).max(axis=1))
    span = hi[_prefix_index(n)]
    scaled = np.floor(np.divide(f, span, out=np.zeros_like(f), where=span > 0) * clip)
    out = np.clip(scaled, 0, clip).astype(np.int64)
    out[~real, :] = 0
    out[:, ~real] = 0
    np.fill_diagonal(out, 0)
    return out


def time_variance_matrix(timestamps: np.ndarray, clip: int, pad_mask: np.ndarray,
                         mode: str = "clipped_quotient") -> np.ndarray:
    """Bucketed absolute time differences, scaled by the smallest positive consecutive gap

    ``clipped_quotient``: min(|t_i - t_j| // t_min, clip)
    ``literal``:          min(|t_i - t_j| * clip // t_min, clip)

    t_min for entry (i, j) is taken over the real slots up to max(i, j).
    """
    if mode not in TIME_MODES:
        raise UsageError(f"time mode must be one of {TIME_MODES}, got {mode!r}")
    n = len(timestamps)
    out = np.zeros((n, n), dtype=np.int64)
    real = np.flatnonzero(pad_mask)
    if real.size < 2:
        return out
    t_all = np.asarray(timestamps, dtype=np.int64)
    t = t_all[real]
    gaps = np.diff(t)
    if np.any(gaps < 0):
        raise UsageError("timestamps must be non-decreasing over real slots")
    if not np.any(gaps > 0):
        return out
    # gap k closes at slot real[k + 1]; a prefix without a positive gap has equal timestamps
    slot_gap = np.full(n, np.iinfo(np.int64).max)
    slot_gap[real[1:]] = np.where(gaps > 0, gaps, np.iinfo(np.int64).max)
    t_min = np.minimum.accumulate(slot_gap)
    t_min = np.where(t_min == np.iinfo(np.int64).max, 1, t_min)[_prefix_index(n)]
    diff = np.abs(t_all[:, None] - t_all[None, :])
    if mode == "clipped_quotient":
        buckets = diff // t_min
    else:
        buckets = (diff * clip) // t_min
    out[np.ix_(real, real)] = np.minimum(buckets, clip)[np.ix_(real, real)]
    return out


def build_relative(window: Window, table: CategoryEmbeddingTable,
                   config: RunConfig) -> tuple[NetCategoryEmbeddings, RelativeIndexMatrices]:
    """Net category embeddings and the J, K, T matrices for one window"""
    if not table.frozen:
        raise UsageError("relative encodings need the frozen category tables")
    net = net_embeddings(window, table)
    n = window.length
    zeros = np.zeros((n, n), dtype=np.int64)
    J = cosine_variance_matrix(net.mu_app, config.clip_app, window.pad_mask) if config.use_J else zeros
    K = cosine_variance_matrix(net.mu_poi, config.clip_poi, window.pad_mask) if config.use_K else zeros
    T = (
        time_variance_matrix(window.timestamps, config.clip_time, window.pad_mask, config.time_mode)
        if config.use_T else zeros
    )
    return net, RelativeIndexMatrices(
        J=J, K=K, T=T, clip_app=config.clip_app, clip_poi=config.clip_poi, clip_time=config.clip_time
    )


class RelativeEncoder:
    """Encodes windows against one frozen table, caching by key"""

    def __init__(self, table: CategoryEmbeddingTable, config: RunConfig):
        self.table = table
        self.config = config
        self.cache: dict[object, EncodedWindow] = {}

    def encode(self, window: Window, key: object = None) -> EncodedWindow:
        if key is not None and key in self.cache:
            return self.cache[key]
        net, rel = build_relative(window, self.table, self.config)
        encoded = EncodedWindow(window=window, net=net, rel=rel)
        if key is not None:
            self.cache[key] = encoded
        return encoded

    def matrices(self) -> dict[object, RelativeIndexMatrices]:
        return {key: enc.rel for key, enc in self.cache.items()}
