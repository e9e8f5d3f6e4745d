"""Exact k-nearest-neighbour graphs over node signals."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class KnnGraph:
    """Directed kNN graph: row ``i`` of ``neighbors`` lists node i's k nearest
    nodes, ordered by distance then by index. Self-loops are excluded."""

    k: int
    neighbors: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.neighbors.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnnGraph):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.neighbors, other.neighbors)

    def __hash__(self):
        return hash((self.k, self.neighbors.tobytes()))


def pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _ordered_nearest(dist_row: np.ndarray, k: int) -> np.ndarray:
    # k smallest of a row, ties broken by lower index
    n = dist_row.shape[0]
    if k < n:
        thresh = np.partition(dist_row, k - 1)[k - 1]
        cand = np.flatnonzero(dist_row <= thresh)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, dist_row[cand]))
    return cand[order[:k]]


def knn_graph(points: np.ndarray, k: int) -> KnnGraph:
    """Exact Euclidean kNN graph of ``points`` (N x D)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"knn_graph: points must be N x D, got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"knn_graph: k must be in [1, {n - 1}] for {n} nodes, got {k}")
    if not np.all(np.isfinite(points)):
        raise ValueError("knn_graph: non-finite coordinate")
    dist = pairwise_sq_distances(points)
    np.fill_diagonal(dist, np.inf)
    neighbors = np.empty((n, k), dtype=np.int64)
    if k < n - 1:
        part = np.argpartition(dist, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(dist, part, axis=1).max(axis=1)
        # rows with a tie straddling the k-th slot need the careful path
        ties = np.count_nonzero(dist <= kth[:, None], axis=1) > k
    else:
        part = None
        ties = np.ones(n, dtype=bool)
    for i in range(n):
        if ties[i]:
            neighbors[i] = _ordered_nearest(dist[i], k)
        else:
            cand = part[i]
            neighbors[i] = cand[np.lexsort((cand, dist[i, cand]))]
    return KnnGraph(k, neighbors)


def nearest_to(points: np.ndarray, index: int, count: int) -> np.ndarray:
    """``index`` followed by its ``count - 1`` nearest other nodes."""
    points = np.asarray(points, dtype=np.float64)
    diff = points - points[index]
    dist = np.sum(diff * diff, axis=-1)
    dist[index] = -np.inf
    return _ordered_nearest(dist, count)


def rebuild_after_transform(transformed, k: int) -> KnnGraph:
    """Graph of a transformed cloud's coordinates; a fresh object, independent of the original graph."""
    coords = transformed.coords if hasattr(transformed, "coords") else transformed
    return knn_graph(coords, k)


def batch_neighbors(graphs: list[KnnGraph]) -> np.ndarray:
    """Stack per-cloud neighbour tables into one table over concatenated node indices."""
    rows, offset = [], 0
    for g in graphs:
        rows.append(g.neighbors + offset)
        offset += g.num_nodes
    return np.concatenate(rows, axis=0)


def dump_graph(graph: KnnGraph, path) -> None:
    lines = [f"{i}: " + " ".join(str(j) for j in row) for i, row in enumerate(graph.neighbors)]
    Path(path).write_text("\n".join(lines) + "\n")
