"""Seeded k-fold subject splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict[str, int]
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        self._check(fold)
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        self._check(fold)
        return sorted(s for s, f in self.assignments.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.test_ids(f)) for f in range(self.k)]

    def _check(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} outside [0, {self.k})")

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "assignments": dict(sorted(self.assignments.items()))},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        raw = json.loads(text)
        return cls(int(raw["k"]), {str(s): int(f) for s, f in raw["assignments"].items()}, int(raw["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def kfold_split(subject_ids: Sequence[str], k: int, seed: int = 0) -> FoldPlan:
    """Shuffle the (sorted) ids with a seeded generator, then deal them round-robin."""
    ids = sorted(set(subject_ids))
    if len(ids) != len(subject_ids):
        raise ValueError("subject ids must be unique")
    if not 1 <= k <= len(ids):
        raise ValueError(f"k={k} must lie in [1, {len(ids)}] for {len(ids)} subjects")
    order = np.random.Generator(np.random.Philox(seed)).permutation(len(ids))
    return FoldPlan(k, {ids[j]: i % k for i, j in enumerate(order)}, seed)
