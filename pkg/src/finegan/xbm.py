"""Cross-batch memory: a FIFO queue of real-sample embeddings and labels."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, PreconditionError

UNIT_TOL = 1e-9


class MemoryBank:
    """Fixed-capacity ring buffer of unit-norm embeddings.

    Capacity counts embeddings, not batches. Stored rows are copies, so they
    act as constants for every later backward pass.
    """

    def __init__(self, capacity, dim=None):
        if capacity < 1:
            raise PreconditionError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = dim
        self._E = None if dim is None else np.zeros((self.capacity, dim))
        self._labels = np.zeros(self.capacity, dtype=np.int64)
        self._start = 0
        self._len = 0

    def __len__(self):
        return self._len

    def enqueue_batch(self, E, labels):
        E = np.asarray(E, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = E.shape[0]
        if n > self.capacity:
            raise ContractError(f"batch of {n} exceeds memory capacity {self.capacity}")
        if labels.shape != (n,):
            raise ContractError("labels must align with embedding rows")
        if n == 0:
            return
        if self._E is None:
            self.dim = E.shape[1]
            self._E = np.zeros((self.capacity, self.dim))
        if E.ndim != 2 or E.shape[1] != self.dim:
            raise ContractError(f"embedding dimension {E.shape[1:]} != bank dimension {self.dim}")
        norms = np.linalg.norm(E, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError("memory bank only accepts unit-norm embeddings")
        pos = (self._start + self._len + np.arange(n)) % self.capacity
        self._E[pos] = E
        self._labels[pos] = labels
        overflow = max(0, self._len + n - self.capacity)
        self._start = (self._start + overflow) % self.capacity
        self._len = min(self.capacity, self._len + n)

    def contents(self):
        """Snapshot ``(E, labels)`` in insertion order, oldest first."""
        order = (self._start + np.arange(self._len)) % self.capacity
        if self._E is None:
            return np.zeros((0, self.dim or 0)), np.zeros(0, dtype=np.int64)
        return self._E[order].copy(), self._labels[order].copy()

    def clear(self):
        self._start = 0
        self._len = 0
