"""
Negative sampling

POI negatives exclude the user's whole history. Category negatives exclude
the categories attached to one check-in.
"""

from __future__ import annotations

from typing import AbstractSet

import numpy as np

from models.models import Corpus
from utils.errors import SamplingError

# Above this visited fraction rejection sampling wastes most draws
_DENSE_FRACTION = 0.5


def _complement(excluded: AbstractSet[int], size: int) -> np.ndarray:
    mask = np.ones(size, dtype=bool)
    mask[list(excluded)] = False
    return np.flatnonzero(mask)


def sample_excluding(excluded: AbstractSet[int], size: int, rng: np.random.Generator) -> int:
    """Uniform draw from [0, size) minus ``excluded``"""
    if len(excluded) >= size:
        raise SamplingError(f"all {size} ids are excluded")
    if len(excluded) > _DENSE_FRACTION * size:
        return int(rng.choice(_complement(excluded, size)))
    while True:
        candidate = int(rng.integers(size))
        if candidate not in excluded:
            return candidate


def sample_negative(corpus: Corpus, user: int, rng: np.random.Generator) -> int:
    """A POI the user (by position in ``corpus.users``) never visited"""
    visited = corpus.visited[user]
    if len(visited) >= corpus.num_pois:
        raise SamplingError(f"user {corpus.user_ids[user]} visited all {corpus.num_pois} POIs")
    return sample_excluding(visited, corpus.num_pois, rng)


def sample_negatives(corpus: Corpus, user: int, rng: np.random.Generator, count: int) -> np.ndarray:
    """Up to ``count`` distinct unvisited POIs; fewer when fewer are eligible"""
    eligible = _complement(corpus.visited[user], corpus.num_pois)
    if count >= eligible.size:
        return rng.permutation(eligible)
    return rng.choice(eligible, size=count, replace=False)


def sample_category_set(used: AbstractSet[int], size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``k`` distinct categories not in ``used``; empty when every category is used"""
    pool = _complement(used, size)
    k = min(k, pool.size)
    if k == 0:
        return pool
    return np.sort(rng.choice(pool, size=k, replace=False))
