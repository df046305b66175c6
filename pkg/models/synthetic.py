"""
Seeded synthetic corpora

Each POI carries one POI category and each POI category has a preferred
app category. A check-in's app category is the preferred one with
probability ``correlation`` and uniform otherwise, so correlation 1 maps
every POI category to exactly one app category and correlation 0 makes
the two independent. Every user cycles through a short personal route of
distinct POIs, which gives the sequence model something to learn.
"""

from __future__ import annotations

import numpy as np

from models.models import CheckIn, Corpus, SynthSpec
from utils.seeding import SeedUtils


def synth_corpus(spec: SynthSpec, seed: int) -> Corpus:
    rng = SeedUtils.rng(seed, "synth")
    n_a, n_s = spec.num_app_categories, spec.num_poi_categories

    poi_category = rng.permutation(np.arange(spec.num_pois) % n_s)
    preferred_app = rng.integers(n_a, size=n_s)
    route_length = min(spec.route_length, spec.num_pois - 1)

    users = []
    for _ in range(spec.num_users):
        route = rng.choice(spec.num_pois, size=route_length, replace=False)
        offset = int(rng.integers(route_length))
        gaps = spec.mean_gap // 2 + 1 + rng.integers(spec.mean_gap, size=spec.seq_len)
        timestamps = int(rng.integers(86_400)) + np.cumsum(gaps)
        follow = rng.random(spec.seq_len) < spec.correlation
        noise = rng.integers(n_a, size=spec.seq_len)

        seq = []
        for k in range(spec.seq_len):
            poi = int(route[(offset + k) % route_length])
            s = int(poi_category[poi])
            app = int(preferred_app[s]) if follow[k] else int(noise[k])
            seq.append(CheckIn(
                poi_id=poi,
                timestamp=int(timestamps[k]),
                app_categories=frozenset({app}),
                poi_categories=frozenset({s}),
            ))
        users.append(seq)

    return Corpus(
        user_ids=list(range(spec.num_users)),
        users=users,
        num_pois=spec.num_pois,
        num_app_categories=n_a,
        num_poi_categories=n_s,
    )
