"""Demographic conditions (age, sex) attached to every image."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

AGE_MIN, AGE_MAX = 0.0, 100.0


class Sex(IntEnum):
    FEMALE = 0
    MALE = 1

    @classmethod
    def parse(cls, value) -> "Sex":
        if isinstance(value, Sex):
            return value
        if isinstance(value, str):
            v = value.strip().lower()
            if v in ("f", "female", "0"):
                return cls.FEMALE
            if v in ("m", "male", "1"):
                return cls.MALE
            raise ValueError(f"unknown sex {value!r}")
        return cls(int(value))


@dataclass(frozen=True)
class Condition:
    age: float
    sex: Sex

    def __post_init__(self):
        if not (AGE_MIN <= float(self.age) <= AGE_MAX) or not np.isfinite(self.age):
            raise ValueError(f"age {self.age} outside [{AGE_MIN:g}, {AGE_MAX:g}]")
        object.__setattr__(self, "age", float(self.age))
        object.__setattr__(self, "sex", Sex.parse(self.sex))


@dataclass(frozen=True)
class ConditionBatch:
    """Column view of a batch of conditions."""

    ages: np.ndarray
    sexes: np.ndarray

    def __len__(self) -> int:
        return len(self.ages)

    def __getitem__(self, i) -> Condition:
        return Condition(float(self.ages[i]), Sex(int(self.sexes[i])))

    def take(self, idx) -> "ConditionBatch":
        return ConditionBatch(self.ages[idx], self.sexes[idx])

    @classmethod
    def of(cls, conds: Iterable[Condition]) -> "ConditionBatch":
        conds = list(conds)
        return cls(np.array([c.age for c in conds], dtype=np.float64),
                   np.array([int(c.sex) for c in conds], dtype=np.int64))


def as_batch(cond, batch: int) -> ConditionBatch:
    """Accept a Condition, a sequence of Conditions or a ConditionBatch."""
    if isinstance(cond, ConditionBatch):
        out = cond
    elif isinstance(cond, Condition):
        out = ConditionBatch(np.full(batch, cond.age), np.full(batch, int(cond.sex), dtype=np.int64))
    elif isinstance(cond, Sequence):
        out = ConditionBatch.of(cond)
    else:
        raise TypeError(f"cannot interpret {type(cond).__name__} as conditions")
    if len(out) != batch:
        raise ValueError(f"{len(out)} conditions for a batch of {batch}")
    return out
