from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def default_names(prefix: str, count: int) -> list[str]:
    """Category vocabulary used when a corpus carries no names"""
    return [f"{prefix}:{i}" for i in range(count)]


class CheckIn(BaseModel):
    """One timestamped event: a POI visit plus the app categories active at that moment"""

    model_config = ConfigDict(frozen=True)

    poi_id: int = Field(ge=0)
    timestamp: int = Field(ge=0)
    app_categories: frozenset[int]
    poi_categories: frozenset[int]

    @field_validator("app_categories", "poi_categories")
    @classmethod
    def categories_nonempty(cls, v):
        if not v:
            raise ValueError("at least one category is required")
        if min(v) < 0:
            raise ValueError("category ids must be nonnegative")
        return v


class Corpus(BaseModel):
    """Per-user check-in sequences with the declared cardinalities"""

    model_config = ConfigDict(frozen=True)

    user_ids: list[int] = Field(default_factory=list)
    users: list[list[CheckIn]] = Field(default_factory=list)
    num_pois: int = Field(0, ge=0)
    num_app_categories: int = Field(0, ge=0)
    num_poi_categories: int = Field(0, ge=0)
    app_names: list[str] = Field(default_factory=list)
    poi_names: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_consistency(self) -> "Corpus":
        if len(self.user_ids) != len(self.users):
            raise ValueError(f"{len(self.user_ids)} user ids for {len(self.users)} sequences")
        if len(set(self.user_ids)) != len(self.user_ids):
            raise ValueError("duplicate user ids")
        if not self.app_names:
            object.__setattr__(self, "app_names", default_names("app", self.num_app_categories))
        if not self.poi_names:
            object.__setattr__(self, "poi_names", default_names("poi", self.num_poi_categories))
        if len(self.app_names) != self.num_app_categories or len(self.poi_names) != self.num_poi_categories:
            raise ValueError("category name lists must match the declared cardinalities")
        for uid, seq in zip(self.user_ids, self.users):
            previous = -1
            for c in seq:
                if c.poi_id >= self.num_pois:
                    raise ValueError(f"user {uid}: poi id {c.poi_id} >= num_pois {self.num_pois}")
                if max(c.app_categories) >= self.num_app_categories:
                    raise ValueError(f"user {uid}: app category out of range [0, {self.num_app_categories})")
                if max(c.poi_categories) >= self.num_poi_categories:
                    raise ValueError(f"user {uid}: poi category out of range [0, {self.num_poi_categories})")
                if c.timestamp < previous:
                    raise ValueError(f"user {uid}: timestamps decrease at {c.timestamp}")
                previous = c.timestamp
        return self

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_checkins(self) -> int:
        return sum(len(seq) for seq in self.users)

    @cached_property
    def visited(self) -> list[frozenset[int]]:
        """POI ids appearing anywhere in each user's sequence"""
        return [frozenset(c.poi_id for c in seq) for seq in self.users]

    def index_of(self, user_id: int) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise KeyError(f"user {user_id} not in corpus") from None

    def with_users(self, user_ids: list[int], users: list[list[CheckIn]]) -> "Corpus":
        """Same cardinalities and vocabularies, different sequences"""
        return Corpus(
            user_ids=user_ids,
            users=users,
            num_pois=self.num_pois,
            num_app_categories=self.num_app_categories,
            num_poi_categories=self.num_poi_categories,
            app_names=self.app_names,
            poi_names=self.poi_names,
        )


@dataclass(frozen=True)
class Window:
    """The N most recent check-ins, left-padded; pad slots have pad_mask False"""

    poi_ids: np.ndarray
    timestamps: np.ndarray
    app_categories: tuple[frozenset[int], ...]
    poi_categories: tuple[frozenset[int], ...]
    pad_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.poi_ids.shape[0])

    @property
    def num_real(self) -> int:
        return int(self.pad_mask.sum())


class SynthSpec(BaseModel):
    """Shape of a synthetic corpus"""

    num_users: int = Field(20, ge=1)
    num_pois: int = Field(10, ge=2)
    num_app_categories: int = Field(5, ge=1)
    num_poi_categories: int = Field(5, ge=1)
    seq_len: int = Field(20, ge=1)
    correlation: float = Field(1.0, ge=0.0, le=1.0)
    route_length: int = Field(4, ge=1)
    mean_gap: int = Field(3600, ge=1)
