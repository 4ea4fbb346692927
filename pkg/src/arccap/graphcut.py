"""Exact s-t max-flow / min-cut and binary submodular energy minimization.

Energies are kept in canonical form: assigning label 0 costs nothing, each
variable carries the cost of label 1, and pairwise terms are non-negative
disagreement penalties. Such energies reduce exactly to one s-t cut.
"""

from collections import deque
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import SubmodularityError, ValidationError


@dataclass(frozen=True)
class FlowNetwork:
    node_count: int
    source: int
    sink: int
    arcs: tuple = ()

    def validate(self):
        if self.node_count < 1:
            raise ValidationError("node_count must be positive")
        for name, node in (("source", self.source), ("sink", self.sink)):
            if not 0 <= node < self.node_count:
                raise ValidationError(f"{name} id {node} out of range")
        if self.source == self.sink:
            raise ValidationError("source and sink must differ")
        for k, (u, v, cap) in enumerate(self.arcs):
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ValidationError(f"arc {k} references a node out of range")
            if not math.isfinite(cap) or cap < 0:
                raise ValidationError(f"arc {k} has invalid capacity {cap!r}")


@dataclass(frozen=True)
class BinaryEnergy:
    """Pairwise binary energy: sum_i unary_i*y_i + sum_ij w_ij*[y_i != y_j]."""

    unary: tuple
    pairwise: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "unary", tuple(float(u) for u in self.unary))
        object.__setattr__(
            self,
            "pairwise",
            tuple((int(i), int(j), float(w)) for i, j, w in self.pairwise),
        )

    @property
    def n(self):
        return len(self.unary)

    @classmethod
    def from_two_sided(cls, cost0, cost1, pairwise=()):
        """Build the canonical form from explicit label-0 and label-1 costs.

        The dropped constant is sum(cost0); add it back to recover the
        original energy value.
        """
        unary = [c1 - c0 for c0, c1 in zip(cost0, cost1)]
        return cls(tuple(unary), tuple(pairwise))

    def validate(self):
        seen = set()
        for i, j, w in self.pairwise:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValidationError(f"pair ({i}, {j}) out of range for n={self.n}")
            if i >= j:
                raise ValidationError(f"pair ({i}, {j}) must satisfy i < j")
            if (i, j) in seen:
                raise ValidationError(f"duplicate pair ({i}, {j})")
            seen.add((i, j))
            if not math.isfinite(w):
                raise ValidationError(f"pair ({i}, {j}) weight is not finite")
            if w < 0:
                raise SubmodularityError(
                    f"pair ({i}, {j}) has negative weight {w}; energy is not submodular"
                )
        if not all(math.isfinite(u) for u in self.unary):
            raise ValidationError("unary costs must be finite")


def max_flow_min_cut(net):
    """Return ``(flow_value, source_side)`` for an s-t network.

    Shortest augmenting paths (Edmonds-Karp). The source side is the set of
    nodes reachable from the source in the final residual graph, which is
    the smallest minimum cut.
    """
    net.validate()
    n = net.node_count
    head, cap, adj = [], [], [[] for _ in range(n)]
    for u, v, c in net.arcs:
        adj[u].append(len(head))
        head.append(v)
        cap.append(float(c))
        adj[v].append(len(head))
        head.append(u)
        cap.append(0.0)

    total = sum(c for _, _, c in net.arcs)
    # residual capacities below this are treated as saturated
    eps = 1e-13 * max(total, 1.0)
    s, t = net.source, net.sink
    flow = 0.0
    while True:
        parent = [-1] * n
        parent[s] = -2
        queue = deque([s])
        while queue and parent[t] == -1:
            u = queue.popleft()
            for e in adj[u]:
                v = head[e]
                if parent[v] == -1 and cap[e] > eps:
                    parent[v] = e
                    queue.append(v)
        if parent[t] == -1:
            break
        bottleneck = math.inf
        v = t
        while v != s:
            e = parent[v]
            bottleneck = min(bottleneck, cap[e])
            v = head[e ^ 1]
        v = t
        while v != s:
            e = parent[v]
            cap[e] -= bottleneck
            cap[e ^ 1] += bottleneck
            v = head[e ^ 1]
        flow += bottleneck

    seen = [False] * n
    seen[s] = True
    queue = deque([s])
    while queue:
        u = queue.popleft()
        for e in adj[u]:
            v = head[e]
            if not seen[v] and cap[e] > eps:
                seen[v] = True
                queue.append(v)
    return flow, frozenset(i for i in range(n) if seen[i])


def cut_capacity(net, source_side):
    return sum(c for u, v, c in net.arcs if u in source_side and v not in source_side)


def _as_bits(e, y):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != e.n:
        raise ValidationError(f"labeling length {y.size} does not match n={e.n}")
    return y


def energy_value(e, y):
    y = _as_bits(e, y)
    value = 0.0
    for i, u in enumerate(e.unary):
        if y[i]:
            value += u
    for i, j, w in e.pairwise:
        if y[i] != y[j]:
            value += w
    return value


def minimize_energy(e):
    """Exact minimizer of a submodular binary energy via one min cut.

    Node ``i`` gets label 1 iff it lies on the source side. The smallest
    source side is returned, which is the intersection of all minimizers
    and therefore the lexicographically smallest optimal labeling.
    """
    e.validate()
    n = e.n
    s, t = n, n + 1
    arcs = []
    for i, u in enumerate(e.unary):
        if u > 0:
            arcs.append((i, t, u))
        elif u < 0:
            arcs.append((s, i, -u))
    for i, j, w in e.pairwise:
        if w > 0:
            arcs.append((i, j, w))
            arcs.append((j, i, w))
    _, side = max_flow_min_cut(FlowNetwork(n + 2, s, t, tuple(arcs)))
    y = np.array([1 if i in side else 0 for i in range(n)], dtype=np.int8)
    return y, energy_value(e, y)


def brute_force_minimum(e):
    """Enumerate all labelings; returns the lexicographically smallest argmin."""
    best, best_y = math.inf, None
    for code in range(2 ** e.n):
        y = np.array([(code >> (e.n - 1 - i)) & 1 for i in range(e.n)], dtype=np.int8)
        v = energy_value(e, y)
        if v < best:
            best, best_y = v, y
    return best_y, best
