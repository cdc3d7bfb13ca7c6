"""Fixed-capacity FIFO queues of teacher embeddings per (class, domain).

Queues store detached unit-norm vectors only. A positive pool for (c, d)
is the union of class-c queues from every other domain; a negative pool
is the union of all other-class queues across every domain, including d.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError
from .tensor import Tensor

_UNIT_TOL = 1e-9


@dataclass
class PoolView:
    """Stacked pool rows plus the (class, domain) each row came from."""

    rows: np.ndarray
    provenance: list[tuple[int, int]]

    def __len__(self) -> int:
        return self.rows.shape[0]


class QueueStore:
    def __init__(self, n_classes: int, n_domains: int, capacity: int, dim: int):
        if n_classes < 1 or n_domains < 1 or capacity < 1 or dim < 1:
            raise ContractError(
                f"queue grid needs positive extents, got C={n_classes} D={n_domains} "
                f"capacity={capacity} dim={dim}")
        self.n_classes = n_classes
        self.n_domains = n_domains
        self.capacity = capacity
        self.dim = dim
        self._grid: list[list[list[np.ndarray]]] = [
            [[] for _ in range(n_domains)] for _ in range(n_classes)
        ]
        # Lifetime enqueue counts, for the queue-discipline checks.
        self.enqueued: dict[tuple[int, int], int] = {
            (c, d): 0 for c in range(n_classes) for d in range(n_domains)
        }

    def _check_cell(self, c: int, d: int) -> None:
        if not 0 <= c < self.n_classes:
            raise IndexError(f"class {c} out of range [0, {self.n_classes})")
        if not 0 <= d < self.n_domains:
            raise IndexError(f"domain {d} out of range [0, {self.n_domains})")

    def queue(self, c: int, d: int) -> list[np.ndarray]:
        self._check_cell(c, d)
        return self._grid[c][d]

    def enqueue_dequeue(self, c: int, d: int, batch) -> None:
        """Append batch rows, then keep only the newest ``capacity`` entries."""
        self._check_cell(c, d)
        if isinstance(batch, Tensor):
            if batch.grad_enabled:
                raise ContractError("queue entries must be detached from the tape")
            batch = batch.data
        rows = np.asarray(batch, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.size == 0:
            return
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ContractError(f"queue entries must be [*, {self.dim}], got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise ContractError(f"queue entry norm off unit by {worst!r} (tolerance {_UNIT_TOL})")
        q = self._grid[c][d]
        q.extend(r.copy() for r in rows)
        if len(q) > self.capacity:
            del q[:-self.capacity]
        self.enqueued[(c, d)] += rows.shape[0]

    def _stack(self, cells: list[tuple[int, int]]) -> PoolView:
        rows: list[np.ndarray] = []
        provenance: list[tuple[int, int]] = []
        for c, d in cells:
            q = self._grid[c][d]
            rows.extend(q)
            provenance.extend([(c, d)] * len(q))
        if rows:
            mat = np.stack(rows, axis=0)
        else:
            mat = np.zeros((0, self.dim))
        return PoolView(rows=mat, provenance=provenance)

    def positive_pool(self, c: int, d: int) -> PoolView:
        """Same class, every domain except ``d``."""
        self._check_cell(c, d)
        return self._stack([(c, dd) for dd in range(self.n_domains) if dd != d])

    def negative_pool(self, c: int, d: int) -> PoolView:
        """Every other class, across all domains including ``d``."""
        self._check_cell(c, d)
        return self._stack([(cc, dd) for cc in range(self.n_classes) if cc != c
                            for dd in range(self.n_domains)])

    def total_stored(self) -> int:
        return sum(len(self._grid[c][d]) for c in range(self.n_classes)
                   for d in range(self.n_domains))
