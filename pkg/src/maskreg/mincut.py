"""Exact minimization of binary submodular energies by max-flow/min-cut.

The max-flow solver is the augmenting-path algorithm with two search
trees that are kept between augmentations (Boykov-Kolmogorov). Nodes
left on the sink side (free nodes included) are reported as label 0, so
among several minimum cuts the one with the fewest label-1 nodes wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

NONE = -1
TERMINAL = -2
ORPHAN = -3
_INF_DIST = 1 << 60

# relative slack for capacities that are zero up to rounding
SUBMODULAR_TOL = 1e-12


class NonSubmodularError(ValueError):
    """A pairwise term violates V01 + V10 >= V00 + V11."""


@njit(cache=True, nogil=True)
def _bk_maxflow(n, first, adj, head, rcap, trcap):
    """Max-flow on a graph in adjacency form; mutates ``rcap`` and ``trcap``.

    ``adj[first[i]:first[i + 1]]`` are the arc ids leaving node ``i``;
    arcs come in sister pairs ``a`` / ``a ^ 1``. ``trcap[i] > 0`` is a
    residual source->i capacity, ``trcap[i] < 0`` a residual i->sink one.
    Returns the flow value and a source-side indicator per node.
    """
    parent = np.full(n, NONE, np.int64)
    is_sink = np.zeros(n, np.bool_)
    ts = np.zeros(n, np.int64)
    dist = np.zeros(n, np.int64)
    size = n + 1
    queue = np.empty(size, np.int64)
    in_queue = np.zeros(n, np.bool_)
    qh = 0
    qt = 0
    orphans = np.empty(size, np.int64)
    oh = 0
    ot = 0
    flow = 0.0

    for i in range(n):
        if trcap[i] != 0.0:
            parent[i] = TERMINAL
            is_sink[i] = trcap[i] < 0.0
            dist[i] = 1
            queue[qt] = i
            qt = (qt + 1) % size
            in_queue[i] = True

    time = 0
    current = -1
    while True:
        i = -1
        if current >= 0 and parent[current] != NONE:
            i = current
        current = -1
        if i < 0:
            while qh != qt:
                j = queue[qh]
                qh = (qh + 1) % size
                in_queue[j] = False
                if parent[j] != NONE:
                    i = j
                    break
            if i < 0:
                break

        # growth
        found = -1
        if not is_sink[i]:
            for k in range(first[i], first[i + 1]):
                a = adj[k]
                if rcap[a] > 0.0:
                    j = head[a]
                    if parent[j] == NONE:
                        is_sink[j] = False
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        if not in_queue[j]:
                            queue[qt] = j
                            qt = (qt + 1) % size
                            in_queue[j] = True
                    elif is_sink[j]:
                        found = a
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
        else:
            for k in range(first[i], first[i + 1]):
                a = adj[k]
                if rcap[a ^ 1] > 0.0:
                    j = head[a]
                    if parent[j] == NONE:
                        is_sink[j] = True
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        if not in_queue[j]:
                            queue[qt] = j
                            qt = (qt + 1) % size
                            in_queue[j] = True
                    elif not is_sink[j]:
                        found = a ^ 1
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
        time += 1
        if found < 0:
            continue
        current = i

        # augmentation along source tree -> found arc -> sink tree
        mid = found
        b = rcap[mid]
        k = head[mid ^ 1]
        while True:
            a = parent[k]
            if a == TERMINAL:
                break
            if rcap[a ^ 1] < b:
                b = rcap[a ^ 1]
            k = head[a]
        if trcap[k] < b:
            b = trcap[k]
        k = head[mid]
        while True:
            a = parent[k]
            if a == TERMINAL:
                break
            if rcap[a] < b:
                b = rcap[a]
            k = head[a]
        if -trcap[k] < b:
            b = -trcap[k]

        rcap[mid ^ 1] += b
        rcap[mid] -= b
        k = head[mid ^ 1]
        while True:
            a = parent[k]
            if a == TERMINAL:
                break
            rcap[a] += b
            rcap[a ^ 1] -= b
            if rcap[a ^ 1] == 0.0:
                parent[k] = ORPHAN
                oh = (oh - 1) % size
                orphans[oh] = k
            k = head[a]
        trcap[k] -= b
        if trcap[k] == 0.0:
            parent[k] = ORPHAN
            oh = (oh - 1) % size
            orphans[oh] = k
        k = head[mid]
        while True:
            a = parent[k]
            if a == TERMINAL:
                break
            rcap[a ^ 1] += b
            rcap[a] -= b
            if rcap[a] == 0.0:
                parent[k] = ORPHAN
                oh = (oh - 1) % size
                orphans[oh] = k
            k = head[a]
        trcap[k] += b
        if trcap[k] == 0.0:
            parent[k] = ORPHAN
            oh = (oh - 1) % size
            orphans[oh] = k
        flow += b

        # adoption
        while oh != ot:
            i = orphans[oh]
            oh = (oh + 1) % size
            sink_side = is_sink[i]
            d_min = _INF_DIST
            a0_min = -1
            for kk in range(first[i], first[i + 1]):
                a0 = adj[kk]
                residual = rcap[a0] if sink_side else rcap[a0 ^ 1]
                if residual > 0.0:
                    j = head[a0]
                    if is_sink[j] == sink_side and parent[j] != NONE:
                        d = 0
                        m = j
                        while True:
                            if ts[m] == time:
                                d += dist[m]
                                break
                            a = parent[m]
                            d += 1
                            if a == TERMINAL:
                                ts[m] = time
                                dist[m] = 1
                                break
                            if a == ORPHAN:
                                d = _INF_DIST
                                break
                            m = head[a]
                        if d < _INF_DIST:
                            if d < d_min:
                                a0_min = a0
                                d_min = d
                            m = j
                            while ts[m] != time:
                                ts[m] = time
                                dist[m] = d
                                d -= 1
                                m = head[parent[m]]
            if a0_min >= 0:
                parent[i] = a0_min
                ts[i] = time
                dist[i] = d_min + 1
            else:
                parent[i] = NONE
                for kk in range(first[i], first[i + 1]):
                    a0 = adj[kk]
                    j = head[a0]
                    if is_sink[j] == sink_side and parent[j] != NONE:
                        residual = rcap[a0] if sink_side else rcap[a0 ^ 1]
                        if residual > 0.0 and not in_queue[j]:
                            queue[qt] = j
                            qt = (qt + 1) % size
                            in_queue[j] = True
                        a = parent[j]
                        if a != TERMINAL and a != ORPHAN and head[a] == i:
                            parent[j] = ORPHAN
                            orphans[ot] = j
                            ot = (ot + 1) % size

    source_side = np.zeros(n, np.bool_)
    for i in range(n):
        source_side[i] = parent[i] != NONE and not is_sink[i]
    return flow, source_side


@njit(cache=True, nogil=True)
def _adjacency(n, tails, heads):
    """Arc arrays for undirected edge list; edge e yields arcs 2e and 2e+1."""
    m = len(tails)
    head = np.empty(2 * m, np.int64)
    count = np.zeros(n + 1, np.int64)
    for e in range(m):
        head[2 * e] = heads[e]
        head[2 * e + 1] = tails[e]
        count[tails[e] + 1] += 1
        count[heads[e] + 1] += 1
    first = np.cumsum(count)
    fill = first[:-1].copy()
    adj = np.empty(2 * m, np.int64)
    for e in range(m):
        adj[fill[tails[e]]] = 2 * e
        fill[tails[e]] += 1
        adj[fill[heads[e]]] = 2 * e + 1
        fill[heads[e]] += 1
    return first, adj, head


@njit(cache=True, nogil=True)
def _solve_binary_core(cost0, cost1, tails, heads, v00, v01, v10, v11):
    """Minimizing labeling of a submodular pairwise binary energy.

    Returns the labels and the index of the first non-submodular edge
    (-1 when all edges are submodular).
    """
    n = len(cost0)
    m = len(tails)
    trcap = cost0 - cost1
    rcap = np.zeros(2 * m)
    bad = -1
    for e in range(m):
        p = tails[e]
        q = heads[e]
        a = v00[e]
        b = v01[e]
        c = v10[e]
        d = v11[e]
        # E = a + (c - a) x_p + (d - c) x_q + lam (1 - x_p) x_q
        trcap[p] -= c - a
        trcap[q] -= d - c
        lam = b + c - a - d
        if lam < 0.0:
            scale = abs(a) + abs(b) + abs(c) + abs(d)
            if lam < -SUBMODULAR_TOL * scale:
                if bad < 0:
                    bad = e
            lam = 0.0
        # cut when x_q = 1 (source side) and x_p = 0: arc q -> p
        rcap[2 * e + 1] = lam
    first, adj, head = _adjacency(n, tails, heads)
    _, source_side = _bk_maxflow(n, first, adj, head, rcap, trcap)
    labels = np.zeros(n, np.uint8)
    for i in range(n):
        if source_side[i]:
            labels[i] = 1
    return labels, bad


@dataclass
class FlowGraph:
    """Capacitated s-t graph.

    ``source_caps[i]`` is the capacity of source->i, ``sink_caps[i]`` of
    i->sink. ``edges`` rows are ``(i, j, cap_ij, cap_ji)``.
    """

    n: int
    source_caps: np.ndarray
    sink_caps: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        self.source_caps = np.asarray(self.source_caps, dtype=np.float64).reshape(self.n)
        self.sink_caps = np.asarray(self.sink_caps, dtype=np.float64).reshape(self.n)
        self.edges = np.asarray(self.edges, dtype=np.float64).reshape(-1, 4)
        caps = np.concatenate([self.source_caps, self.sink_caps, self.edges[:, 2:].ravel()])
        if not np.isfinite(caps).all() or (caps < 0).any():
            raise ValueError("capacities must be finite and non-negative")
        ends = self.edges[:, :2]
        if len(ends) and (ends.min() < 0 or ends.max() >= self.n
                          or (ends != np.round(ends)).any()):
            raise ValueError("edge endpoints must be node indices")

    def cut_capacity(self, source_side) -> float:
        """Capacity of the cut with ``source_side`` nodes on the source side."""
        s = np.asarray(source_side, dtype=bool)
        total = self.source_caps[~s].sum() + self.sink_caps[s].sum()
        i = self.edges[:, 0].astype(np.intp)
        j = self.edges[:, 1].astype(np.intp)
        total += self.edges[s[i] & ~s[j], 2].sum()
        total += self.edges[s[j] & ~s[i], 3].sum()
        return float(total)


def maxflow(graph: FlowGraph):
    """Maximum s-t flow value and a minimum cut (True = source side)."""
    tails = graph.edges[:, 0].astype(np.int64)
    heads = graph.edges[:, 1].astype(np.int64)
    rcap = np.empty(2 * len(tails))
    rcap[0::2] = graph.edges[:, 2]
    rcap[1::2] = graph.edges[:, 3]
    # a node with both terminal links pushes min(cs, ct) straight through
    base = np.minimum(graph.source_caps, graph.sink_caps).sum()
    trcap = graph.source_caps - graph.sink_caps
    first, adj, head = _adjacency(graph.n, tails, heads)
    flow, side = _bk_maxflow(graph.n, first, adj, head, rcap, trcap)
    return float(flow + base), side


@dataclass
class BinaryProblem:
    """Pairwise binary energy ``sum_i unary[i, x_i] + sum_e V_e[x_p, x_q]``.

    ``pairwise`` rows are ``(V00, V01, V10, V11)`` for edge ``edges[e] = (p, q)``.
    """

    unary: np.ndarray
    edges: np.ndarray
    pairwise: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.pairwise = np.asarray(self.pairwise, dtype=np.float64).reshape(-1, 4)
        if len(self.edges) != len(self.pairwise):
            raise ValueError("one pairwise row per edge is required")

    @property
    def n(self) -> int:
        return len(self.unary)

    def energy(self, labeling) -> float:
        x = np.asarray(labeling, dtype=np.intp)
        e = self.unary[np.arange(self.n), x].sum()
        if len(self.edges):
            xp = x[self.edges[:, 0]]
            xq = x[self.edges[:, 1]]
            e += self.pairwise[np.arange(len(self.edges)), 2 * xp + xq].sum()
        return float(e)


def solve_binary(problem: BinaryProblem):
    """Globally minimal labeling of a submodular binary problem.

    Returns ``(labeling, energy)``; the energy is evaluated on the
    original problem. Raises :class:`NonSubmodularError` otherwise.
    """
    v = problem.pairwise
    labels, bad = _solve_binary_core(
        problem.unary[:, 0].copy(), problem.unary[:, 1].copy(),
        problem.edges[:, 0].copy(), problem.edges[:, 1].copy(),
        v[:, 0].copy(), v[:, 1].copy(), v[:, 2].copy(), v[:, 3].copy())
    if bad >= 0:
        a, b, c, d = v[bad]
        raise NonSubmodularError(
            f"edge {bad} {tuple(problem.edges[bad])} is not submodular: "
            f"V01 + V10 = {b + c} < V00 + V11 = {a + d}")
    return labels, problem.energy(labels)
