"""Bounded FIFO transition storage with uniform sampling.

Each transition carries the one-step-backward tuple (previous state and
action) alongside the usual SAC fields, so the same buffer feeds both the
incremental dynamics model and the actor-critic updates.  Two instances are
used in training: one for real environment data, one for imagined data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NoDataError

_HEADER = struct.Struct("<3q")  # n, m, size


@dataclass(frozen=True)
class Transition:
    s_prev: np.ndarray
    a_prev: np.ndarray
    s: np.ndarray
    a: np.ndarray
    reward: float
    s_next: np.ndarray
    done: bool
    is_imagined: bool = False


@dataclass(frozen=True)
class TransitionBatch:
    """Column view of sampled transitions (row i across arrays is one transition)."""

    s_prev: np.ndarray
    a_prev: np.ndarray
    s: np.ndarray
    a: np.ndarray
    reward: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    is_imagined: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]

    def transitions(self) -> list[Transition]:
        return [Transition(self.s_prev[i].copy(), self.a_prev[i].copy(),
                           self.s[i].copy(), self.a[i].copy(), float(self.reward[i]),
                           self.s_next[i].copy(), bool(self.done[i]), bool(self.is_imagined[i]))
                for i in range(len(self))]


def batch_from_transitions(transitions: list[Transition]) -> TransitionBatch:
    if not transitions:
        raise NoDataError("empty transition list")
    return TransitionBatch(
        s_prev=np.stack([t.s_prev for t in transitions]).astype(np.float64),
        a_prev=np.stack([t.a_prev for t in transitions]).astype(np.float64),
        s=np.stack([t.s for t in transitions]).astype(np.float64),
        a=np.stack([t.a for t in transitions]).astype(np.float64),
        reward=np.array([t.reward for t in transitions], dtype=np.float64),
        s_next=np.stack([t.s_next for t in transitions]).astype(np.float64),
        done=np.array([t.done for t in transitions], dtype=bool),
        is_imagined=np.array([t.is_imagined for t in transitions], dtype=bool),
    )


def concat_batches(a: TransitionBatch, b: TransitionBatch) -> TransitionBatch:
    return TransitionBatch(*(np.concatenate([getattr(a, f), getattr(b, f)])
                             for f in ("s_prev", "a_prev", "s", "a", "reward",
                                       "s_next", "done", "is_imagined")))


class ReplayBuffer:
    """Ring buffer of Transitions; oldest element is evicted once full.

    Single writer assumed (the training loop); sampling is read-only.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self.size = 0
        self.insert_cursor = 0
        self._cols: dict[str, np.ndarray] | None = None

    def _allocate(self, t: Transition) -> None:
        n = t.s.shape[0]
        m = t.a.shape[0]
        self._cols = {
            "s_prev": np.zeros((self.capacity, n)),
            "a_prev": np.zeros((self.capacity, m)),
            "s": np.zeros((self.capacity, n)),
            "a": np.zeros((self.capacity, m)),
            "reward": np.zeros(self.capacity),
            "s_next": np.zeros((self.capacity, n)),
            "done": np.zeros(self.capacity, dtype=bool),
            "is_imagined": np.zeros(self.capacity, dtype=bool),
        }

    @property
    def state_dim(self) -> int:
        if self._cols is None:
            raise NoDataError("buffer is empty")
        return self._cols["s"].shape[1]

    @property
    def action_dim(self) -> int:
        if self._cols is None:
            raise NoDataError("buffer is empty")
        return self._cols["a"].shape[1]

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        if self._cols is None:
            self._allocate(t)
        cols = self._cols
        vecs = {"s_prev": t.s_prev, "a_prev": t.a_prev, "s": t.s, "a": t.a, "s_next": t.s_next}
        for name, v in vecs.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != cols[name].shape[1:]:
                raise ContractError(f"{name} shape {v.shape} != buffer shape {cols[name].shape[1:]}")
            if not np.all(np.isfinite(v)):
                raise ContractError(f"{name} has non-finite entries")
            cols[name][self.insert_cursor] = v
        if not np.isfinite(t.reward):
            raise ContractError("reward must be finite")
        cols["reward"][self.insert_cursor] = t.reward
        cols["done"][self.insert_cursor] = t.done
        cols["is_imagined"][self.insert_cursor] = t.is_imagined
        self.insert_cursor = (self.insert_cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < 1:
            raise NoDataError("cannot sample from an empty buffer")
        if k < 1:
            raise ContractError("k must be >= 1")
        return rng.integers(0, self.size, size=k)

    def sample_batch(self, k: int, seed: int | np.random.Generator) -> TransitionBatch:
        """k transitions drawn i.i.d. uniformly with replacement; deterministic per seed."""
        rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
        idx = self._indices(k, rng)
        cols = self._cols
        return TransitionBatch(*(cols[f][idx].copy() for f in
                                 ("s_prev", "a_prev", "s", "a", "reward",
                                  "s_next", "done", "is_imagined")))

    def sample(self, k: int, seed: int | np.random.Generator) -> list[Transition]:
        return self.sample_batch(k, seed).transitions()

    def contents(self) -> list[Transition]:
        """All stored transitions in FIFO order (oldest first)."""
        if self.size == 0:
            return []
        start = self.insert_cursor % self.capacity if self.size == self.capacity else 0
        order = [(start + i) % self.capacity for i in range(self.size)]
        cols = self._cols
        return [Transition(cols["s_prev"][i].copy(), cols["a_prev"][i].copy(),
                           cols["s"][i].copy(), cols["a"][i].copy(), float(cols["reward"][i]),
                           cols["s_next"][i].copy(), bool(cols["done"][i]),
                           bool(cols["is_imagined"][i])) for i in order]

    def save(self, path: str) -> None:
        """Snapshot to a flat little-endian binary file.

        Layout: int64 header (n, m, size), then `size` rows of float64 fields
        in FIFO order: s_prev[n], a_prev[m], s[n], a[m], reward, s_next[n],
        done, is_imagined (booleans stored as 0.0/1.0).
        """
        if self.size == 0:
            raise NoDataError("cannot snapshot an empty buffer")
        n, m = self.state_dim, self.action_dim
        rows = []
        for t in self.contents():
            rows.append(np.concatenate([t.s_prev, t.a_prev, t.s, t.a,
                                        [t.reward], t.s_next,
                                        [1.0 if t.done else 0.0],
                                        [1.0 if t.is_imagined else 0.0]]))
        data = np.stack(rows).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(n, m, self.size))
            fh.write(data.tobytes())

    @classmethod
    def load(cls, path: str, capacity: int | None = None) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            n, m, size = _HEADER.unpack(fh.read(_HEADER.size))
            row_len = 3 * n + 2 * m + 3
            data = np.frombuffer(fh.read(), dtype="<f8").reshape(size, row_len)
        buf = cls(capacity if capacity is not None else max(size, 1))
        for row in data:
            p = 0
            s_prev, p = row[p:p + n], p + n
            a_prev, p = row[p:p + m], p + m
            s, p = row[p:p + n], p + n
            a, p = row[p:p + m], p + m
            reward, p = float(row[p]), p + 1
            s_next, p = row[p:p + n], p + n
            done, p = bool(row[p]), p + 1
            imagined = bool(row[p])
            buf.push(Transition(np.array(s_prev), np.array(a_prev), np.array(s),
                                np.array(a), reward, np.array(s_next), done, imagined))
        return buf
