from __future__ import annotations

from typing import Sequence

import numpy as np

from models.models import CheckIn, Window
from utils.errors import UsageError

EMPTY: frozenset[int] = frozenset()


def window(user_seq: Sequence[CheckIn], n: int, pad_id: int) -> Window:
    """Last ``n`` check-ins, left-padded with ``pad_id`` to exactly ``n`` slots"""
    if n < 1:
        raise UsageError(f"window length must be >= 1, got {n}")
    if not user_seq:
        raise UsageError("cannot window an empty sequence")
    recent = list(user_seq[-n:])
    pad = n - len(recent)

    poi_ids = np.full(n, pad_id, dtype=np.int64)
    timestamps = np.zeros(n, dtype=np.int64)
    pad_mask = np.zeros(n, dtype=bool)
    poi_ids[pad:] = [c.poi_id for c in recent]
    timestamps[pad:] = [c.timestamp for c in recent]
    pad_mask[pad:] = True
    return Window(
        poi_ids=poi_ids,
        timestamps=timestamps,
        app_categories=(EMPTY,) * pad + tuple(c.app_categories for c in recent),
        poi_categories=(EMPTY,) * pad + tuple(c.poi_categories for c in recent),
        pad_mask=pad_mask,
    )


def training_pair(user_seq: Sequence[CheckIn], n: int, pad_id: int) -> tuple[Window, Window]:
    """Input window over seq[:-1] and the aligned next-check-in targets over seq[1:]

    Slot k of the target window is the check-in that follows slot k of the
    input window, so both share one pad mask.
    """
    if len(user_seq) < 2:
        raise UsageError("a training pair needs at least two check-ins")
    return window(user_seq[:-1], n, pad_id), window(user_seq[1:], n, pad_id)
