"""Density clustering over mutual reachability distances.

Steps: core distances, mutual reachability matrix, exact minimum spanning tree
(Prim, dense), single-linkage merge tree, condensed tree at
``min_cluster_size``, then Excess-of-Mass selection.  The root cluster is
never selected, so an input with no real split comes back as all noise.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .params import HdbscanParams

MIN_DIST = 1e-12


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return cdist(x, x)


def core_distances(d: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the ``min_samples``-th nearest other point."""
    n = len(d)
    if n < 2:
        return np.zeros(n)
    k = min(min_samples, n - 1)
    off = d.copy()
    np.fill_diagonal(off, np.inf)
    return np.partition(off, k - 1, axis=1)[:, k - 1]


def mutual_reachability(d: np.ndarray, min_samples: int) -> np.ndarray:
    core = core_distances(d, min_samples)
    m = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(m, 0.0)
    return m


def prim_mst(m: np.ndarray) -> np.ndarray:
    """Minimum spanning tree of a dense symmetric matrix as rows (u, v, w)."""
    n = len(m)
    if n < 2:
        return np.zeros((0, 3))
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    cur = 0
    in_tree[0] = True
    for t in range(n - 1):
        row = m[cur]
        upd = (~in_tree) & (row < best)
        best[upd] = row[upd]
        parent[upd] = cur
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        edges[t] = (parent[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        cur = nxt
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Merge tree rows (left, right, distance, size); new nodes numbered from n."""
    order = np.argsort(mst[:, 2], kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    out = np.empty((n - 1, 4))
    for t, e in enumerate(order):
        a, b, w = int(mst[e, 0]), int(mst[e, 1]), mst[e, 2]
        ra, rb = find(a), find(b)
        node = n + t
        parent[ra] = parent[rb] = node
        size[node] = size[ra] + size[rb]
        out[t] = (ra, rb, w, size[node])
    return out


@dataclass
class CondensedTree:
    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    size: np.ndarray
    n_points: int

    def clusters(self) -> np.ndarray:
        return np.unique(np.concatenate([[self.n_points], self.child[self.child >= self.n_points]]))


def condense_tree(linkage: np.ndarray, n: int, min_cluster_size: int) -> CondensedTree:
    root = 2 * n - 2
    left = {n + i: int(r[0]) for i, r in enumerate(linkage)}
    right = {n + i: int(r[1]) for i, r in enumerate(linkage)}
    dist = {n + i: r[2] for i, r in enumerate(linkage)}
    size = {n + i: int(r[3]) for i, r in enumerate(linkage)}

    def node_size(x):
        return 1 if x < n else size[x]

    def leaves(x):
        out, stack = [], [x]
        while stack:
            y = stack.pop()
            if y < n:
                out.append(y)
            else:
                stack.extend((right[y], left[y]))
        return sorted(out)

    rows = []
    label = {root: n}
    next_label = n + 1
    queue = deque([root])
    while queue:
        node = queue.popleft()
        lam = 1.0 / max(dist[node], MIN_DIST)
        me = label[node]
        kids = (left[node], right[node])
        big = [c for c in kids if node_size(c) >= min_cluster_size]
        if len(big) == 2:
            for c in kids:
                label[c] = next_label
                rows.append((me, next_label, lam, node_size(c)))
                next_label += 1
                if c >= n:
                    queue.append(c)
            continue
        for c in kids:
            if c in big:
                label[c] = me
                if c >= n:
                    queue.append(c)
            else:
                rows.extend((me, p, lam, 1) for p in leaves(c))
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return CondensedTree(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
                         arr[:, 3].astype(np.int64), n)


def stabilities(tree: CondensedTree) -> dict[int, float]:
    """Sum over members of (lambda at which they leave - lambda at cluster birth)."""
    birth = {tree.n_points: 0.0}
    for c, lam in zip(tree.child.tolist(), tree.lam.tolist()):
        if c >= tree.n_points:
            birth[c] = lam
    stab = {c: 0.0 for c in birth}
    for p, lam, s in zip(tree.parent.tolist(), tree.lam.tolist(), tree.size.tolist()):
        stab[p] += (lam - birth[p]) * s
    return stab


def select_eom(tree: CondensedTree, stab: dict[int, float]) -> list[int]:
    n = tree.n_points
    children: dict[int, list[int]] = {c: [] for c in stab}
    for p, c in zip(tree.parent.tolist(), tree.child.tolist()):
        if c >= n:
            children[p].append(c)
    selected = {c: True for c in stab}
    best = dict(stab)
    for c in sorted(stab, reverse=True):
        kids = children[c]
        if not kids:
            continue
        total = sum(best[k] for k in kids)
        if c == n or total > stab[c]:
            selected[c] = False
            best[c] = total
        else:
            stack = list(kids)
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(children[k])
    return sorted(c for c, s in selected.items() if s and c != n)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    stability: dict[int, float] = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def noise_fraction(self) -> float:
        return float((self.labels < 0).mean()) if len(self.labels) else 0.0


def hdbscan_fit(x: np.ndarray, p: HdbscanParams = HdbscanParams()) -> ClusterAssignment:
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < p.min_cluster_size or n < 2:
        return ClusterAssignment(np.full(n, -1, dtype=np.int64))
    m = mutual_reachability(pairwise_distances(x), p.min_samples)
    tree = condense_tree(single_linkage(prim_mst(m), n), n, p.min_cluster_size)
    stab = stabilities(tree)
    chosen = select_eom(tree, stab)
    dense = {c: i for i, c in enumerate(chosen)}
    parent_of = {c: p_ for p_, c in zip(tree.parent.tolist(), tree.child.tolist()) if c >= n}

    def owner(c):
        while c != n:
            if c in dense:
                return dense[c]
            c = parent_of[c]
        return -1

    labels = np.full(n, -1, dtype=np.int64)
    for p_, c in zip(tree.parent.tolist(), tree.child.tolist()):
        if c < n:
            labels[c] = owner(p_)
    return ClusterAssignment(labels, {dense[c]: stab[c] for c in chosen})
