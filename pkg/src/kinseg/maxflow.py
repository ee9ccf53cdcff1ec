"""Exact s-t max-flow / min-cut on sparse networks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import bk_maxflow, source_reachable

__all__ = ["FlowNetwork", "max_flow"]


@dataclass
class FlowNetwork:
    """Nodes ``0..n-1`` with terminal arcs and directed neighbour arc pairs.

    ``edges[e] = (i, j)`` carries capacity ``caps[e]`` on ``i -> j`` and
    ``rev_caps[e]`` on ``j -> i``.
    """

    n_nodes: int
    source_caps: np.ndarray
    sink_caps: np.ndarray
    edges: np.ndarray
    caps: np.ndarray
    rev_caps: np.ndarray

    def __post_init__(self):
        n = int(self.n_nodes)
        self.source_caps = np.asarray(self.source_caps, dtype=float).reshape(n)
        self.sink_caps = np.asarray(self.sink_caps, dtype=float).reshape(n)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.caps = np.asarray(self.caps, dtype=float).reshape(-1)
        self.rev_caps = np.asarray(self.rev_caps, dtype=float).reshape(-1)
        if not (len(self.edges) == len(self.caps) == len(self.rev_caps)):
            raise ValueError("edges, caps and rev_caps must have equal length")
        for name in ("source_caps", "sink_caps", "caps", "rev_caps"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge endpoint out of range")

    def with_terminals(self, source_caps, sink_caps) -> "FlowNetwork":
        """Same arcs, new terminal capacities; shares the compiled adjacency."""
        net = FlowNetwork(self.n_nodes, source_caps, sink_caps, self.edges, self.caps, self.rev_caps)
        net._csr = self._adjacency()
        return net

    def _adjacency(self):
        if getattr(self, "_csr", None) is None:
            self._csr = _csr(int(self.n_nodes), self.edges, self.caps, self.rev_caps)
        return self._csr

    @classmethod
    def empty(cls, n_nodes: int) -> "FlowNetwork":
        z = np.zeros(n_nodes)
        return cls(n_nodes, z, z.copy(), np.zeros((0, 2), np.int64), np.zeros(0), np.zeros(0))

    def cut_value(self, source_side) -> float:
        """Capacity of the cut separating ``source_side`` from the rest."""
        S = np.asarray(source_side, dtype=bool)
        i, j = self.edges[:, 0], self.edges[:, 1]
        total = self.source_caps[~S].sum() + self.sink_caps[S].sum()
        total += self.caps[S[i] & ~S[j]].sum() + self.rev_caps[S[j] & ~S[i]].sum()
        return float(total)


def _csr(n, edges, caps, rev_caps):
    m = len(edges)
    tail = np.empty(2 * m, np.int64)
    head = np.empty(2 * m, np.int64)
    cap = np.empty(2 * m)
    tail[0::2], head[0::2], cap[0::2] = edges[:, 0], edges[:, 1], caps
    tail[1::2], head[1::2], cap[1::2] = edges[:, 1], edges[:, 0], rev_caps
    order = np.argsort(tail, kind="stable")
    pos = np.empty_like(order)
    pos[order] = np.arange(2 * m)
    first = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(tail, minlength=n), out=first[1:])
    return first, head[order], pos[order ^ 1], cap[order]


def max_flow(net: FlowNetwork):
    """Solve the network exactly.

    Returns ``(flow, source_side)`` where ``source_side`` is the smallest
    source set of a minimum cut: the nodes still reachable from the source in
    the final residual graph.
    """
    n = int(net.n_nodes)
    if n == 0:
        return 0.0, np.zeros(0, bool)
    first, head, sister, cap = net._adjacency()
    rcap = cap.copy()
    direct = np.minimum(net.source_caps, net.sink_caps)
    tr_cap = net.source_caps - net.sink_caps
    flow = bk_maxflow(first, head, sister, rcap, tr_cap)
    side = source_reachable(first, head, rcap, tr_cap)
    return float(direct.sum() + flow), side
