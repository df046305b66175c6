from __future__ import annotations

from typing import Sequence

import numpy as np

K_LIST = (1, 5, 10)


def pessimistic_rank(true_score: float, negative_scores: np.ndarray) -> int:
    """1 + number of negatives scoring at least as high as the true item"""
    return 1 + int(np.count_nonzero(np.asarray(negative_scores) >= true_score))


def hits_at(ranks: np.ndarray, k: int) -> float:
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def ndcg_at(ranks: np.ndarray, k: int) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if not ranks.size:
        return 0.0
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def mrr(ranks: np.ndarray) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(1.0 / ranks)) if ranks.size else 0.0


def ranking_metrics(ranks: Sequence[int] | np.ndarray, k_list: Sequence[int] = K_LIST) -> dict[str, float]:
    """Hits@k, NDCG@k for every k plus MRR, keyed like ``hits@10`` / ``ndcg@10`` / ``mrr``"""
    ranks = np.asarray(ranks, dtype=np.int64)
    out: dict[str, float] = {}
    for k in k_list:
        out[f"hits@{k}"] = hits_at(ranks, k)
        out[f"ndcg@{k}"] = ndcg_at(ranks, k)
    out["mrr"] = mrr(ranks)
    return out


def rms_distance(z: np.ndarray, mu: np.ndarray) -> float:
    """sqrt(mean over rows of ||z - mu||^2)"""
    z, mu = np.atleast_2d(z), np.atleast_2d(mu)
    if z.shape[0] == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.sum((z - mu) ** 2, axis=1))))
