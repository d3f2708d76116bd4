"""Proportional prioritized experience replay backed by a sum tree."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import Rng, Transition, dumps_record


class SumTree:
    """Array-backed binary tree whose internal nodes hold the sum of their children.

    Leaves start at index ``capacity - 1``; the root at index 0 holds the total.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity - 1)

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def __getitem__(self, leaf: int) -> float:
        return float(self.nodes[leaf + self.capacity - 1])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity - 1 :]

    def update(self, leaf: int, value: float) -> None:
        idx = leaf + self.capacity - 1
        self.nodes[idx] = value
        # Recompute parents from children rather than adding deltas, so the root never drifts.
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] = self.nodes[2 * idx + 1] + self.nodes[2 * idx + 2]

    def find(self, mass: float) -> int:
        """Leaf whose cumulative-priority interval contains ``mass``."""
        idx = 0
        while 2 * idx + 1 < len(self.nodes):
            left = 2 * idx + 1
            if mass < self.nodes[left] or self.nodes[left + 1] == 0.0:
                idx = left
            else:
                mass -= self.nodes[left]
                idx = left + 1
        return idx - (self.capacity - 1)


class PrioritizedBuffer:
    """Ring buffer of transitions sampled with probability proportional to
    ``(|td| + eps) ** alpha``, with importance-sampling weights.

    Indices handed out by :meth:`sample` are insertion serial numbers, so an update
    aimed at an entry that has since been overwritten is silently dropped.
    """

    def __init__(self, capacity: int = 5000, alpha: float = 0.6, beta: float = 0.4, eps: float = 1e-3):
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self.eps = eps
        self.tree = SumTree(capacity)
        self.entries: list = [None] * capacity
        self.serial = np.full(capacity, -1, dtype=np.int64)
        self.inserted = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, t: Transition) -> int:
        slot = self.inserted % self.capacity
        self.entries[slot] = t
        self.serial[slot] = self.inserted
        self.tree.update(slot, self.max_priority)
        self.inserted += 1
        return self.inserted - 1

    def priority(self, index: int) -> Optional[float]:
        slot = index % self.capacity
        return self.tree[slot] if self.serial[slot] == index else None

    def sample(self, batch: int, rng: Rng, beta: Optional[float] = None) -> list:
        """``batch`` independent draws (with replacement) as (index, transition, weight)."""
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        beta = self.beta if beta is None else beta
        total = self.tree.total
        slots = [self.tree.find(m) for m in rng.uniform(0.0, total, size=batch)]
        probs = np.array([self.tree[s] for s in slots]) / total
        w = (n * probs) ** (-beta)
        w = w / w.max()
        return [(int(self.serial[s]), self.entries[s], float(wi)) for s, wi in zip(slots, w)]

    def update_priority(self, index: int, td_abs: float) -> None:
        slot = index % self.capacity
        if index < 0 or self.serial[slot] != index:
            return
        p = (abs(float(td_abs)) + self.eps) ** self.alpha
        self.tree.update(slot, p)
        self.max_priority = max(self.max_priority, p)

    def dump(self, path) -> None:
        """Write stored transitions, oldest first, in the line-delimited record format."""
        order = np.argsort(np.where(self.serial >= 0, self.serial, np.iinfo(np.int64).max))
        with open(path, "w") as fh:
            for slot in order[: len(self)]:
                rec = {"index": int(self.serial[slot]), "priority": self.tree[int(slot)]}
                rec.update(self.entries[slot].to_record())
                fh.write(dumps_record(rec) + "\n")
