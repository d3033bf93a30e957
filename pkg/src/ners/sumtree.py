"""Array-backed binary sum-tree for proportional sampling."""

from __future__ import annotations

import numpy as np


class EmptyTreeError(RuntimeError):
    pass


class SumTree:
    """Leaves hold nonnegative masses; node ``i`` holds ``tree[2i] + tree[2i+1]``.

    Leaves live at ``[size_pow2, 2 * size_pow2)``, root at index 1. Slots past
    ``capacity`` stay at zero. Insertion is ring-buffer style: once full, the
    oldest slot is overwritten.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._base = 1 << max(0, (self.capacity - 1).bit_length())
        self._depth = self._base.bit_length() - 1
        self.tree = np.zeros(2 * self._base, dtype=np.float64)
        self.size = 0
        self.write_cursor = 0

    def __len__(self):
        return self.size

    @property
    def total(self) -> float:
        return float(self.tree[1])

    @property
    def leaf_values(self) -> np.ndarray:
        return self.tree[self._base : self._base + self.capacity]

    def __getitem__(self, slot):
        return self.tree[self._base + slot]

    def insert(self, value: float) -> int:
        if not value >= 0:
            raise ValueError(f"priority must be >= 0, got {value}")
        slot = self.write_cursor
        self._set(np.array([slot]), np.array([float(value)]))
        self.write_cursor = (self.write_cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot

    def update(self, slot: int, value: float) -> None:
        self.update_many([slot], [value])

    def update_many(self, slots, values) -> None:
        slots = np.asarray(slots, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if slots.shape != values.shape:
            raise ValueError("slots and values differ in length")
        if np.any(slots < 0) or np.any(slots >= self.size):
            raise IndexError("update of unoccupied slot")
        if np.any(~(values >= 0)):
            raise ValueError("priorities must be >= 0")
        self._set(slots, values)

    def _set(self, slots, values):
        tree = self.tree
        # parents are recomputed from their children so sums never accumulate drift
        if len(slots) == 1:
            node = int(slots[0]) + self._base
            tree[node] = values[0]
            node >>= 1
            while node:
                tree[node] = tree[2 * node] + tree[2 * node + 1]
                node >>= 1
            return
        nodes = slots + self._base
        tree[nodes] = values
        for _ in range(self._depth):
            nodes >>= 1
            tree[nodes] = tree[2 * nodes] + tree[2 * nodes + 1]

    def find(self, targets) -> np.ndarray:
        """Map prefix-sum targets in ``[0, total)`` to slots by descending the tree."""
        u = np.array(targets, dtype=np.float64)
        node = np.ones(u.shape, dtype=np.int64)
        for _ in range(self._depth):
            left = 2 * node
            left_sum = self.tree[left]
            go_right = (u >= left_sum) & (self.tree[left + 1] > 0)
            # rounding can push u past the left mass when the right side is empty
            go_right |= left_sum <= 0
            u = np.where(go_right, u - left_sum, u)
            node = np.where(go_right, left + 1, left)
        return node - self._base

    def sample_indices(self, count: int, rng, stratified: bool = False) -> np.ndarray:
        total = self.total
        if self.size == 0 or not total > 0:
            raise EmptyTreeError("cannot sample from an empty or zero-mass tree")
        if count < 1:
            raise ValueError("count must be >= 1")
        if stratified:
            edges = np.arange(count, dtype=np.float64) * (total / count)
            u = edges + rng.random(count) * (total / count)
        else:
            u = rng.random(count) * total
        u = np.minimum(u, np.nextafter(total, 0.0))
        return self.find(u)

    def probabilities(self) -> np.ndarray:
        """Per-slot draw probability over occupied slots."""
        return self.leaf_values[: self.size] / self.total

    def check(self, rtol=1e-9) -> bool:
        """Brute-force consistency check of every internal node."""
        for node in range(self._base - 1, 0, -1):
            expect = self.tree[2 * node] + self.tree[2 * node + 1]
            if not np.isclose(self.tree[node], expect, rtol=rtol, atol=0.0):
                return False
        return True
