"""Recursive forward shortest-path solver and a brute-force oracle.

Each subnetwork is solved as a shortest path on its local graph, where every
child subnetwork is contracted to a pseudo-arc weighted by the child's own
optimal value, working bottom-up from the activity level.  Excluding the
activity repeat arcs, every local graph is acyclic with nodes already in
topological order, so a single backward sweep gives exact distances even with
negative arc costs; the repeat arcs form the only directed cycles in the whole
network and are checked for nonnegative cycle cost up front.  Optimal
fragments are reconstructed greedily so that ties resolve to the
lexicographically smallest sequence of global arc indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SolverError
from .hiernet import ROOT, HierNetwork

CYCLE_TOL = 1e-12
TIE_TOL = 1e-9


@dataclass
class ForwardSolution:
    z: dict = field(default_factory=dict)        # (l,t) -> optimal value
    argmin_arcs: dict = field(default_factory=dict)   # (l,t) -> arc index tuple
    argmin_children: dict = field(default_factory=dict)  # (l,t) -> child id tuple

    @property
    def total(self) -> float:
        return self.z[ROOT]


def check_cycles(net: HierNetwork, c: np.ndarray) -> None:
    """The only directed cycles are activity repeat loops; require each to
    have nonnegative cost so shortest paths are well defined."""
    for arc in net.arcs:
        if arc.kind != "repeat":
            continue
        fwd = net.arc_between(arc.head, arc.tail)
        if c[fwd] + c[arc.index] < -CYCLE_TOL:
            raise SolverError(
                f"negative repeat cycle in subnet {arc.owner}: "
                f"arcs {fwd},{arc.index} sum to {c[fwd] + c[arc.index]:.3e}"
            )


def solve_forward(net: HierNetwork, c: np.ndarray) -> ForwardSolution:
    """Optimal traversal value for every subnetwork under arc costs ``c``."""
    c = np.asarray(c, dtype=float)
    if c.shape != (net.n_arcs,):
        raise InputError(f"cost vector must have length {net.n_arcs}")
    check_cycles(net, c)

    sol = ForwardSolution()
    for sid in sorted(net.subnets.keys(), reverse=True):
        _solve_subnet(net, sid, c, sol)
    return sol


def _local_graph(net: HierNetwork, sid, c, sol):
    """Topologically ordered local nodes plus outgoing arc lists.

    Arcs are (head, weight, global arc index or None, child id or None);
    pseudo child arcs carry the child's optimal value.
    """
    sub = net.subnets[sid]
    order = [sub.s_node]
    if sub.is_leaf:
        for a in sub.activities:
            order.extend([a.start_node, a.end_node])
    else:
        for cid in sub.children:
            cs, ce = net.boundary(cid)
            order.extend([cs, ce])
    order.append(sub.e_node)
    pos = {node: i for i, node in enumerate(order)}

    out: list = [[] for _ in order]
    for idx in net.arc_ids.get(sid, ()):
        arc = net.arcs[idx]
        if arc.kind == "repeat":
            continue  # never on a shortest simple path; cycle cost checked
        out[pos[arc.tail]].append((pos[arc.head], c[idx], idx, None))
    for cid in (net.subnets[sid].children if not sub.is_leaf else ()):
        cs, ce = net.boundary(cid)
        out[pos[cs]].append((pos[ce], sol.z[cid], None, cid))
    return order, out


def _solve_subnet(net: HierNetwork, sid, c, sol) -> None:
    order, out = _local_graph(net, sid, c, sol)
    n = len(order)
    dist = np.full(n, np.inf)
    dist[n - 1] = 0.0
    for i in range(n - 2, -1, -1):
        for head, w, _idx, _cid in out[i]:
            val = w + dist[head]
            if val < dist[i]:
                dist[i] = val
    if not np.isfinite(dist[0]):
        raise SolverError(f"subnet {sid} has no start-to-end path")

    # greedy reconstruction; among optimality-preserving arcs prefer the
    # smallest global arc index (pseudo child arcs never tie with real ones:
    # child start nodes have a single outgoing option)
    arcs: list = []
    kids: list = []
    i = 0
    while i != n - 1:
        best = None
        for head, w, idx, cid in sorted(out[i], key=lambda e: (e[2] is None, e[2] or 0)):
            slack = w + dist[head] - dist[i]
            if slack <= TIE_TOL * max(1.0, abs(dist[i])):
                best = (head, idx, cid)
                break
        if best is None:
            raise SolverError(f"reconstruction failed in subnet {sid}")
        head, idx, cid = best
        if idx is not None:
            arcs.append(idx)
        if cid is not None:
            kids.append(cid)
        i = head
    sol.z[sid] = float(dist[0])
    sol.argmin_arcs[sid] = tuple(arcs)
    sol.argmin_children[sid] = tuple(kids)


# ---------------------------------------------------------------------------
# Brute-force oracle


def enumerate_paths(net: HierNetwork, cap: int = 10 ** 7) -> list[tuple[int, ...]]:
    """All simple start-to-end paths of the flattened network as arc tuples.

    Repeat arcs never occur on simple paths (an activity's end node is only
    reachable through its start node), so the enumeration runs on a DAG.
    """
    adj: dict = {}
    for arc in net.arcs:
        if arc.kind == "repeat":
            continue
        adj.setdefault(arc.tail, []).append((arc.head, arc.index))
    for v in adj:
        adj[v].sort()
    s0, e0 = net.boundary(ROOT)
    paths: list = []
    stack: list = [(s0, ())]
    while stack:
        node, prefix = stack.pop()
        if node == e0:
            paths.append(prefix)
            if len(paths) > cap:
                raise InputError(f"path enumeration exceeded cap {cap}")
            continue
        for head, idx in reversed(adj.get(node, ())):
            stack.append((head, prefix + (idx,)))
    paths.sort()
    return paths


def brute_force_shortest(net: HierNetwork, c: np.ndarray, cap: int = 10 ** 7) -> float:
    """Exact minimum cost over all simple start-to-end paths."""
    c = np.asarray(c, dtype=float)
    check_cycles(net, c)
    best = np.inf
    for path in enumerate_paths(net, cap):
        cost = float(sum(c[i] for i in path))
        if cost < best:
            best = cost
    return best
