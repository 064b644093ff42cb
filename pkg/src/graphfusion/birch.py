"""BIRCH clustering: a CF-tree followed by an agglomerative global phase.

Leaf entries hold clustering-feature triples (count, linear sum, squared sum).
A point is absorbed by the nearest leaf entry when the entry's RMS radius
stays within the threshold; otherwise it opens a new entry, splitting nodes
that exceed the branching factor. If the tree grows past ``max_entries`` the
threshold is enlarged and the tree rebuilt, as in the original algorithm.
The global phase merges leaf-entry centroids (weighted, centroid linkage)
until at most ``target_k`` clusters remain. Each input point keeps the entry
it was inserted into, so the final assignment is a true partition.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class ClusterSet:
    """Partition of the input points plus per-entry merge diagnostics."""

    assignments: np.ndarray  # (n_points,) cluster id per point
    centroids: np.ndarray  # (count, d) weighted feature centroids
    count: int
    effective_threshold: float = 0.0  # after any rebuild escalations
    entry_centroids: np.ndarray = field(repr=False, default=None)  # (M, d)
    entry_counts: np.ndarray = field(repr=False, default=None)  # (M,)
    entry_rms: np.ndarray = field(repr=False, default=None)  # (M,)
    entry_cluster: np.ndarray = field(repr=False, default=None)  # (M,)


class _Entry:
    __slots__ = ("n", "ls", "ss", "child", "points")

    def __init__(self, x: np.ndarray, index: int | None, child: "_Node | None" = None):
        self.n = 1
        self.ls = x.copy()
        self.ss = float(x @ x)
        self.child = child
        self.points = [index] if index is not None else None

    @property
    def centroid(self) -> np.ndarray:
        return self.ls / self.n


class _Node:
    __slots__ = ("is_leaf", "entries")

    def __init__(self, is_leaf: bool):
        self.is_leaf = is_leaf
        self.entries: list[_Entry] = []


def _nearest_entry(entries: list[_Entry], x: np.ndarray) -> int:
    cents = np.array([e.ls / e.n for e in entries])
    d2 = ((cents - x) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def _split_node(node: _Node) -> tuple[_Entry, _Entry]:
    """Split an overfull node around its two farthest entries."""
    cents = np.array([e.ls / e.n for e in node.entries])
    d2 = ((cents[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    left = _Node(node.is_leaf)
    right = _Node(node.is_leaf)
    for k, e in enumerate(node.entries):
        if d2[k, i] <= d2[k, j]:
            left.entries.append(e)
        else:
            right.entries.append(e)

    def wrap(child: _Node) -> _Entry:
        first = child.entries[0]
        ent = _Entry(first.ls.copy(), None, child=child)
        ent.n, ent.ss = first.n, first.ss
        for e in child.entries[1:]:
            ent.n += e.n
            ent.ls = ent.ls + e.ls
            ent.ss += e.ss
        return ent

    return wrap(left), wrap(right)


class _CFTree:
    def __init__(self, threshold: float, branching: int):
        self.threshold2 = threshold * threshold
        self.branching = branching
        self.root = _Node(is_leaf=True)
        self.n_leaf_entries = 0

    def insert(self, x: np.ndarray, index: int) -> _Entry:
        if not self.root.entries:
            ent = _Entry(x, index)
            self.root.entries.append(ent)
            self.n_leaf_entries += 1
            return ent
        path: list[tuple[_Node, _Entry]] = []
        node = self.root
        while not node.is_leaf:
            ent = node.entries[_nearest_entry(node.entries, x)]
            path.append((node, ent))
            node = ent.child
        ent = node.entries[_nearest_entry(node.entries, x)]
        new_n = ent.n + 1
        new_ls = ent.ls + x
        new_ss = ent.ss + float(x @ x)
        rms2 = new_ss / new_n - float(new_ls @ new_ls) / (new_n * new_n)
        if rms2 <= self.threshold2:
            ent.n, ent.ls, ent.ss = new_n, new_ls, new_ss
            ent.points.append(index)
            leaf_entry = ent
        else:
            leaf_entry = _Entry(x, index)
            node.entries.append(leaf_entry)
            self.n_leaf_entries += 1
        for parent, pent in path:
            pent.n += 1
            pent.ls = pent.ls + x
            pent.ss += float(x @ x)
        self._split_upward(node, path)
        return leaf_entry

    def _split_upward(self, node: _Node, path: list[tuple[_Node, _Entry]]) -> None:
        while len(node.entries) > self.branching:
            left, right = _split_node(node)
            if path:
                parent, pent = path.pop()
                pos = parent.entries.index(pent)
                parent.entries[pos : pos + 1] = [left, right]
                node = parent
            else:
                new_root = _Node(is_leaf=False)
                new_root.entries = [left, right]
                self.root = new_root
                return

    def leaf_entries(self) -> list[_Entry]:
        out: list[_Entry] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.extend(node.entries)
            else:
                # DFS preserving left-to-right entry order
                stack.extend(e.child for e in reversed(node.entries))
        return out


def _merge_entries(
    centroids: np.ndarray, weights: np.ndarray, target_k: int
) -> np.ndarray:
    """Greedy weighted centroid-linkage merge down to ``target_k`` groups.

    Returns, per entry, the index of the entry it was merged into (union-find
    parents). Ties in merge distance resolve by lowest entry index.
    """
    m = len(centroids)
    cent = centroids.astype(np.float64).copy()
    w = weights.astype(np.float64).copy()
    alive = np.ones(m, dtype=bool)
    version = np.zeros(m, dtype=np.int64)
    parent = np.arange(m)
    n_alive = m

    def nearest(i: int) -> tuple[float, int]:
        d2 = ((cent - cent[i]) ** 2).sum(axis=1)
        d2[~alive] = np.inf
        d2[i] = np.inf
        j = int(np.argmin(d2))
        return float(d2[j]), j

    heap: list[tuple[float, int, int, int, int]] = []
    for i in range(m):
        d2, j = nearest(i)
        heap.append((d2, i, j, 0, 0))
    heapq.heapify(heap)
    while n_alive > target_k:
        d2, i, j, vi, vj = heapq.heappop(heap)
        if not alive[i] or version[i] != vi:
            continue
        if not alive[j] or version[j] != vj:
            nd2, nj = nearest(i)
            heapq.heappush(heap, (nd2, i, nj, int(version[i]), int(version[nj])))
            continue
        total = w[i] + w[j]
        cent[i] = (w[i] * cent[i] + w[j] * cent[j]) / total
        w[i] = total
        alive[j] = False
        parent[j] = i
        version[i] += 1
        n_alive -= 1
        if n_alive > target_k:
            nd2, nj = nearest(i)
            heapq.heappush(heap, (nd2, i, nj, int(version[i]), int(version[nj])))
    return parent


def birch_cluster(
    points: np.ndarray,
    target_k: int,
    threshold: float,
    branching: int,
    max_entries: int | None = None,
) -> ClusterSet:
    """Cluster ``points`` into at most ``target_k`` groups with BIRCH."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("points must be a non-empty (n, d) array")
    if target_k < 1:
        raise ContractError(f"target_k must be >= 1, got {target_k}")
    if threshold <= 0.0:
        raise ContractError(f"threshold must be positive, got {threshold}")
    if branching < 2:
        raise ContractError(f"branching factor must be >= 2, got {branching}")
    if max_entries is None:
        max_entries = max(2 * target_k, 512)

    thr = threshold
    for _ in range(64):
        tree = _CFTree(thr, branching)
        point_entry: list[_Entry] = []
        for i in range(pts.shape[0]):
            point_entry.append(tree.insert(pts[i], i))
        if tree.n_leaf_entries <= max_entries:
            break
        thr *= 1.5  # rebuild with a larger radius, as in standard BIRCH

    entries = tree.leaf_entries()
    m = len(entries)
    entry_cent = np.array([e.ls / e.n for e in entries])
    entry_n = np.array([e.n for e in entries], dtype=np.int64)
    entry_rms = np.sqrt(
        np.maximum(
            np.array([e.ss for e in entries]) / entry_n - (entry_cent**2).sum(axis=1),
            0.0,
        )
    )

    if m > target_k:
        parent = _merge_entries(entry_cent, entry_n.astype(np.float64), target_k)
    else:
        parent = np.arange(m)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    roots: dict[int, int] = {}
    entry_cluster = np.empty(m, dtype=np.int64)
    for i in range(m):
        r = find(i)
        if r not in roots:
            roots[r] = len(roots)
        entry_cluster[i] = roots[r]
    count = len(roots)

    dim = pts.shape[1]
    sums = np.zeros((count, dim))
    counts = np.zeros(count)
    for e, cid in zip(entries, entry_cluster):
        sums[cid] += e.ls
        counts[cid] += e.n
    centroids = sums / counts[:, None]

    entry_index = {id(e): i for i, e in enumerate(entries)}
    assignments = np.array(
        [entry_cluster[entry_index[id(e)]] for e in point_entry], dtype=np.int64
    )
    return ClusterSet(
        assignments=assignments,
        centroids=centroids,
        count=count,
        effective_threshold=thr,
        entry_centroids=entry_cent,
        entry_counts=entry_n,
        entry_rms=entry_rms,
        entry_cluster=entry_cluster,
    )
