"""Referential game: attribute-structured objects, candidate sampling, reward."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ObjectId = tuple[int, ...]

N_CANDIDATES = 5


@dataclass(frozen=True)
class ObjectSpace:
    """Objects described by independent attributes, encoded as stacked one-hots.

    ``value_counts`` lists the number of values per attribute, e.g. ``(8, 4)``
    for 8 colors and 4 shapes (32 objects, 12-dim encoding).
    """

    value_counts: tuple[int, ...]

    def __post_init__(self):
        if not self.value_counts or any(n < 1 for n in self.value_counts):
            raise ValueError(f"invalid attribute value counts {self.value_counts}")

    @property
    def n_attributes(self) -> int:
        return len(self.value_counts)

    @property
    def n_objects(self) -> int:
        return int(np.prod(self.value_counts))

    @property
    def encoding_dim(self) -> int:
        return int(sum(self.value_counts))

    def object_from_index(self, index: int) -> ObjectId:
        if not 0 <= index < self.n_objects:
            raise ValueError(f"object index {index} out of range for {self.n_objects} objects")
        out = []
        for n in reversed(self.value_counts):
            out.append(index % n)
            index //= n
        return tuple(reversed(out))

    def index_of(self, obj: ObjectId) -> int:
        self._check(obj)
        index = 0
        for v, n in zip(obj, self.value_counts):
            index = index * n + v
        return index

    def objects(self) -> list[ObjectId]:
        return [self.object_from_index(i) for i in range(self.n_objects)]

    def _check(self, obj: ObjectId) -> None:
        if len(obj) != self.n_attributes or any(
            not 0 <= v < n for v, n in zip(obj, self.value_counts)
        ):
            raise ValueError(f"object {obj} invalid for value counts {self.value_counts}")

    def encoding_matrix(self) -> np.ndarray:
        """All object encodings, row ``i`` for flat object index ``i`` (cached)."""
        return _encoding_matrix(self.value_counts)


@lru_cache(maxsize=8)
def _encoding_matrix(value_counts: tuple[int, ...]) -> np.ndarray:
    space = ObjectSpace(value_counts)
    mat = np.zeros((space.n_objects, space.encoding_dim))
    offsets = np.concatenate(([0], np.cumsum(value_counts)[:-1]))
    for i in range(space.n_objects):
        obj = space.object_from_index(i)
        for a, v in enumerate(obj):
            mat[i, offsets[a] + v] = 1.0
    mat.setflags(write=False)
    return mat


def encode(space: ObjectSpace, obj: ObjectId) -> np.ndarray:
    """Concatenated one-hot encoding; exactly one 1 per attribute block."""
    space._check(obj)
    return space.encoding_matrix()[space.index_of(obj)].copy()


@dataclass(frozen=True)
class GameInstance:
    """One round: a target shown to the speaker, five candidates shown to the listener."""

    target: ObjectId
    candidates: tuple[ObjectId, ...]
    target_pos: int

    def __post_init__(self):
        if len(self.candidates) != N_CANDIDATES:
            raise ValueError(f"expected {N_CANDIDATES} candidates, got {len(self.candidates)}")
        if len(set(self.candidates)) != N_CANDIDATES:
            raise ValueError("candidates must be pairwise distinct")
        if self.candidates[self.target_pos] != self.target:
            raise ValueError("target_pos does not point at the target")


@dataclass
class GameBatch:
    """Vectorized games as flat object indices."""

    targets: np.ndarray      # (B,) int
    candidates: np.ndarray   # (B, 5) int
    target_pos: np.ndarray   # (B,) int

    def __len__(self) -> int:
        return len(self.targets)


def sample_game_batch(space: ObjectSpace, batch_size: int, rng: np.random.Generator) -> GameBatch:
    """Sample targets uniformly, 4 distinct non-target distractors, uniform slot.

    Distractors are drawn by ranking i.i.d. uniform keys over the non-target
    objects (uniform subset, uniform order).
    """
    n = space.n_objects
    if n < N_CANDIDATES:
        raise ValueError(f"object space has {n} objects; need at least {N_CANDIDATES}")
    b = batch_size
    targets = rng.integers(0, n, size=b)
    keys = rng.random((b, n))
    rows = np.arange(b)
    keys[rows, targets] = np.inf
    part = np.argpartition(keys, N_CANDIDATES - 1, axis=1)[:, : N_CANDIDATES - 1]
    order = np.argsort(np.take_along_axis(keys, part, axis=1), axis=1)
    distractors = np.take_along_axis(part, order, axis=1)

    target_pos = rng.integers(0, N_CANDIDATES, size=b)
    candidates = np.empty((b, N_CANDIDATES), dtype=np.int64)
    candidates[rows, target_pos] = targets
    # indices of the non-target slots, in ascending order per row
    open_slots = np.argsort(np.arange(N_CANDIDATES)[None, :] == target_pos[:, None],
                            axis=1, kind="stable")[:, : N_CANDIDATES - 1]
    np.put_along_axis(candidates, open_slots, distractors, axis=1)
    return GameBatch(targets=targets, candidates=candidates, target_pos=target_pos)


def sample_game(space: ObjectSpace, rng: np.random.Generator) -> GameInstance:
    """Sample a single game round."""
    batch = sample_game_batch(space, 1, rng)
    return GameInstance(
        target=space.object_from_index(int(batch.targets[0])),
        candidates=tuple(space.object_from_index(int(i)) for i in batch.candidates[0]),
        target_pos=int(batch.target_pos[0]),
    )


def reward(guess_index: int, instance: GameInstance) -> float:
    """1.0 for pointing at the target slot, else 0.0."""
    if not 0 <= guess_index < N_CANDIDATES:
        raise ValueError(f"guess index {guess_index} out of range [0, {N_CANDIDATES})")
    return 1.0 if guess_index == instance.target_pos else 0.0
