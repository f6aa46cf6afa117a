"""Leiden community detection for RB-modularity on undirected weighted graphs.

Quality of a partition (configuration null model, resolution ``gamma``):

    Q = 1/(2m) * sum_c [ in_c - gamma * K_c^2 / (2m) ]

with ``in_c`` the summed adjacency entries inside community ``c`` (each
undirected edge counted twice) and ``K_c`` its total degree. Self-loops carry
``A_ii = 2 * (internal weight)`` so that aggregation preserves ``in_c`` and
degrees.

Each outer iteration runs fast local moving, refinement, and aggregation
until every community is a single aggregate node; outer iterations repeat
until the partition stops changing.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


def _as_csr(adjacency) -> sparse.csr_matrix:
    A = sparse.csr_matrix(adjacency, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if (abs(A - A.T) > 1e-12).nnz:
        raise ValueError("adjacency must be symmetric")
    A.sum_duplicates()
    return A


def modularity(adjacency, labels, resolution: float = 1.0) -> float:
    A = _as_csr(adjacency)
    labels = np.asarray(labels)
    two_m = A.sum()
    if two_m == 0:
        return 0.0
    _, codes = np.unique(labels, return_inverse=True)
    S = sparse.csr_matrix((np.ones(len(codes)), (np.arange(len(codes)), codes)))
    inside = (S.T @ A @ S).diagonal()
    K = np.asarray(S.T @ np.asarray(A.sum(axis=1)).ravel()).ravel()
    return float((inside - resolution * K * K / two_m).sum() / two_m)


class _Graph:
    """Adjacency lists without self-loops plus per-node self-loop weight and degree."""

    def __init__(self, A: sparse.csr_matrix):
        self.n = A.shape[0]
        self.degree = np.asarray(A.sum(axis=1)).ravel()
        self.self_loop = A.diagonal().copy()
        self.nbrs = []
        self.wts = []
        for v in range(self.n):
            lo, hi = A.indptr[v], A.indptr[v + 1]
            idx, w = A.indices[lo:hi], A.data[lo:hi]
            keep = idx != v
            self.nbrs.append(idx[keep].tolist())
            self.wts.append(w[keep].tolist())
        self.A = A


def _neighbor_weights(g: _Graph, v: int, comm) -> dict:
    out = {}
    for u, w in zip(g.nbrs[v], g.wts[v]):
        c = comm[u]
        out[c] = out.get(c, 0.0) + w
    return out


def _move_nodes_fast(g: _Graph, comm: list, gamma: float, two_m: float, rng) -> bool:
    """Greedy queue-based local moving; returns True when any node moved."""
    n_slots = max(max(comm) + 1, g.n) + 1
    K = np.zeros(n_slots)
    size = np.zeros(n_slots, dtype=np.int64)
    for v, c in enumerate(comm):
        K[c] += g.degree[v]
        size[c] += 1
    empty = set(np.flatnonzero(size == 0).tolist())
    queue = deque(rng.permutation(g.n).tolist())
    in_queue = np.ones(g.n, dtype=bool)
    moved = False
    while queue:
        v = queue.popleft()
        in_queue[v] = False
        kv = g.degree[v]
        old = comm[v]
        K[old] -= kv
        size[old] -= 1
        if size[old] == 0:
            empty.add(old)
        weights = _neighbor_weights(g, v, comm)
        best_c = old
        best_gain = weights.get(old, 0.0) - gamma * kv * K[old] / two_m
        for c in sorted(weights):
            if c == old:
                continue
            gain = weights[c] - gamma * kv * K[c] / two_m
            if gain > best_gain + 1e-12:
                best_c, best_gain = c, gain
        if best_gain < 0.0:
            # being alone (gain 0) beats every neighbouring community
            best_c = min(empty)
        empty.discard(best_c)
        comm[v] = best_c
        K[best_c] += kv
        size[best_c] += 1
        if best_c != old:
            moved = True
            for u in g.nbrs[v]:
                if comm[u] != best_c and not in_queue[u]:
                    queue.append(u)
                    in_queue[u] = True
    return moved


def _refine(g: _Graph, comm: list, gamma: float, two_m: float, rng, theta: float) -> list:
    """Merge singletons inside each community into well-connected subcommunities."""
    refined = list(range(g.n))
    K_ref = g.degree.copy()
    singleton = np.ones(g.n, dtype=bool)
    members = {}
    for v, c in enumerate(comm):
        members.setdefault(c, []).append(v)
    K_comm = {c: g.degree[vs].sum() for c, vs in members.items()}

    # weight from each refined community to the rest of its parent community
    ext = np.zeros(g.n)
    for v in range(g.n):
        ext[v] = sum(w for u, w in zip(g.nbrs[v], g.wts[v]) if comm[u] == comm[v])

    for c in sorted(members):
        nodes = members[c]
        Kc = K_comm[c]
        for v in [nodes[i] for i in rng.permutation(len(nodes))]:
            kv = g.degree[v]
            if not singleton[v]:
                continue
            if ext[v] < gamma * kv * (Kc - kv) / two_m:
                continue
            weights = {}
            for u, w in zip(g.nbrs[v], g.wts[v]):
                if comm[u] == c:
                    r = refined[u]
                    weights[r] = weights.get(r, 0.0) + w
            # staying alone is always a candidate with zero gain
            candidates, gains = [refined[v]], [0.0]
            for r in sorted(weights):
                if r == refined[v]:
                    continue
                if ext[r] < gamma * K_ref[r] * (Kc - K_ref[r]) / two_m:
                    continue
                gain = weights[r] - gamma * kv * K_ref[r] / two_m
                if gain >= 0.0:
                    candidates.append(r)
                    gains.append(gain)
            gains = np.array(gains)
            prob = np.exp((gains - gains.max()) / theta)
            prob /= prob.sum()
            target = candidates[int(rng.choice(len(candidates), p=prob))]
            if target == refined[v]:
                continue
            # update bookkeeping for the merged subcommunity
            own = refined[v]
            w_to_target = weights[target]
            ext[target] = ext[target] + ext[v] - 2.0 * w_to_target
            K_ref[target] += kv
            K_ref[own] = 0.0
            ext[own] = 0.0
            refined[v] = target
            singleton[v] = False
            singleton[target] = False
    return refined


def _relabel(labels) -> list:
    mapping = {}
    return [mapping.setdefault(c, len(mapping)) for c in labels]


def _aggregate(A: sparse.csr_matrix, labels: list):
    n_new = max(labels) + 1
    S = sparse.csr_matrix((np.ones(len(labels)), (np.arange(len(labels)), labels)), shape=(len(labels), n_new))
    return sparse.csr_matrix(S.T @ A @ S)


@dataclass
class LeidenResult:
    labels: np.ndarray
    quality: float
    history: list = field(default_factory=list)


def leiden(
    adjacency,
    resolution: float = 1.0,
    seed: int = 0,
    theta: float = 0.01,
    max_outer: int = 50,
) -> LeidenResult:
    """Partition the graph; ``history`` holds the quality after each outer iteration."""
    A = _as_csr(adjacency)
    n = A.shape[0]
    two_m = A.sum()
    if n == 0:
        return LeidenResult(np.zeros(0, dtype=np.int64), 0.0, [])
    if two_m == 0:
        labels = np.arange(n)
        return LeidenResult(labels, 0.0, [0.0])
    rng = np.random.default_rng(seed)
    membership = list(range(n))
    history = [modularity(A, membership, resolution)]
    for _ in range(max_outer):
        previous = list(membership)
        # one Leiden pass starting from the current flat partition
        level_A = A
        node_of = list(range(n))  # original node -> aggregate node
        comm = _relabel(membership)
        while True:
            g = _Graph(level_A)
            _move_nodes_fast(g, comm, resolution, two_m, rng)
            comm = _relabel(comm)
            flat = [comm[node_of[v]] for v in range(n)]
            if max(comm) + 1 == g.n:
                break
            refined = _relabel(_refine(g, comm, resolution, two_m, rng, theta))
            n_ref = max(refined) + 1
            parent = [0] * n_ref
            for v, r in enumerate(refined):
                parent[r] = comm[v]
            if n_ref == g.n:
                # refinement kept every node apart; aggregate on the coarse partition
                refined = comm
                n_ref = max(comm) + 1
                parent = list(range(n_ref))
            level_A = _aggregate(level_A, refined)
            node_of = [refined[node_of[v]] for v in range(n)]
            comm = parent
        membership = _relabel(flat)
        history.append(modularity(A, membership, resolution))
        if history[-1] < history[-2] - 1e-12:
            raise RuntimeError(f"quality decreased from {history[-2]} to {history[-1]}")
        if membership == _relabel(previous):
            break
    labels = np.array(membership, dtype=np.int64)
    return LeidenResult(labels, history[-1], history)
