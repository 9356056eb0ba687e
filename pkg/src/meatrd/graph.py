"""Directed k-nearest-neighbour spot graph and hop-limited neighbourhoods."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class SpotGraph:
    """``out_neighbors[i]`` holds the k spots nearest to spot ``i`` (edges i -> j)."""

    out_neighbors: np.ndarray  # (n, k) int

    @property
    def n(self) -> int:
        return self.out_neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.out_neighbors.shape[1]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) arrays; src aggregates from dst during message passing."""
        src = np.repeat(np.arange(self.n), self.k)
        return src, self.out_neighbors.reshape(-1)

    def khop(self, node: int, L: int = 3) -> list[int]:
        """Nodes reachable from ``node`` within ``L`` out-edge hops, root first, BFS order."""
        if not 0 <= node < self.n:
            raise IndexError(f"node {node} out of range for graph of {self.n} nodes")
        if L < 0:
            raise ValueError("L must be >= 0")
        seen = {node: 0}
        order = [node]
        queue = deque([node])
        while queue:
            u = queue.popleft()
            if seen[u] == L:
                continue
            for v in self.out_neighbors[u]:
                v = int(v)
                if v not in seen:
                    seen[v] = seen[u] + 1
                    order.append(v)
                    queue.append(v)
        return order

    def hop_index(self, L: int = 3) -> list[list[int]]:
        return [self.khop(i, L) for i in range(self.n)]

    @cached_property
    def _hop3_sets(self) -> list[frozenset[int]]:
        return [frozenset(self.khop(i, 3)) for i in range(self.n)]

    def within_hops(self, i: int, j: int, L: int = 3) -> bool:
        """True when either node lies in the other's L-hop set."""
        if L == 3:
            return j in self._hop3_sets[i] or i in self._hop3_sets[j]
        return j in self.khop(i, L) or i in self.khop(j, L)


def build_knn_graph(coords: np.ndarray, k: int = 6, tie_decimals: int = 9) -> SpotGraph:
    """Brute-force Euclidean k-NN excluding self.

    Distances that agree to ``tie_decimals`` decimals are ties, broken by the
    smaller spot index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        raise ValueError(f"need more than k={k} spots, got {n}")
    nbrs = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    chunk = 512
    for start in range(0, n, chunk):
        block = coords[start:start + chunk]
        d2 = ((block[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
        d = np.round(np.sqrt(d2), tie_decimals)
        for r in range(block.shape[0]):
            i = start + r
            d[r, i] = np.inf
            order = np.lexsort((idx, d[r]))
            nbrs[i] = order[:k]
    return SpotGraph(out_neighbors=nbrs)


def hex_lattice(n_rows: int, n_cols: int, spacing: float = 1.0) -> np.ndarray:
    """Visium-style hexagonal spot layout (odd rows shifted by half a spacing)."""
    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    x = (cols + 0.5 * (rows % 2)) * spacing
    y = rows * spacing * np.sqrt(3.0) / 2.0
    return np.column_stack([x.ravel(), y.ravel()])


def square_lattice(n_rows: int, n_cols: int, spacing: float = 1.0) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    return np.column_stack([cols.ravel() * spacing, rows.ravel() * spacing]).astype(np.float64)


def _conflict_sets(graph: SpotGraph, min_hops: int) -> list[set[int]]:
    """Nodes within ``min_hops`` of each node in either direction."""
    fwd = graph._hop3_sets if min_hops == 3 else [frozenset(graph.khop(i, min_hops)) for i in range(graph.n)]
    sets: list[set[int]] = [set(f) for f in fwd]
    for u, hop in enumerate(fwd):
        for v in hop:
            sets[v].add(u)
    return sets


def sample_spread_batches(graph: SpotGraph, nodes: np.ndarray, batch_size: int,
                          min_hops: int = 3) -> list[np.ndarray]:
    """First-fit partition of ``nodes`` (in the given order) into batches.

    No two nodes of a batch lie within ``min_hops`` of each other in either
    direction; a node that conflicts with every open batch starts a new one.
    """
    conflict = _conflict_sets(graph, min_hops)
    batches: list[list[int]] = []
    blocked: list[set[int]] = []
    for v in nodes:
        v = int(v)
        for b, blk in zip(batches, blocked):
            if len(b) < batch_size and v not in blk:
                b.append(v)
                blk.update(conflict[v])
                break
        else:
            batches.append([v])
            blocked.append(set(conflict[v]))
    return [np.asarray(b, dtype=np.int64) for b in batches]


def sample_batches(graph: SpotGraph, nodes: np.ndarray, batch_size: int, min_hops: int = 3,
                   conflicts: list[set[int]] | None = None) -> tuple[list[np.ndarray], int]:
    """Split ``nodes`` into consecutive batches of ``batch_size`` (the last may be smaller).

    Each batch is filled greedily, in order, with nodes that are not within
    ``min_hops`` of a node already in it. When no such node remains the batch
    is topped up with conflicting nodes. Returns the batches and the number of
    nodes that were admitted despite a conflict.
    """
    conflict = conflicts if conflicts is not None else _conflict_sets(graph, min_hops)
    remaining = [int(v) for v in nodes]
    batches, n_conflicting = [], 0
    while remaining:
        batch, blocked, rest = [], set(), []
        for v in remaining:
            if len(batch) < batch_size and v not in blocked:
                batch.append(v)
                blocked.update(conflict[v])
            else:
                rest.append(v)
        short = min(batch_size - len(batch), len(rest))
        if short > 0:
            batch.extend(rest[:short])
            rest = rest[short:]
            n_conflicting += short
        batches.append(np.asarray(batch, dtype=np.int64))
        remaining = rest
    return batches, n_conflicting
