"""Walk representation on a hierarchical network.

A walk is stored per subnetwork: a nonnegative integer flow on the subnetwork's
own arcs plus the ordered set of child subnetworks it passes through.  Flow
balance holds inside every subnetwork with a unit supply at its start node, a
unit demand at its end node, and unit adjustments at the boundary nodes of
traversed children.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .hiernet import ROOT, HierNetwork


@dataclass
class HierWalk:
    per_subnet_flows: dict = field(default_factory=dict)  # (l,t) -> {arc: count}
    traversed: dict = field(default_factory=dict)          # (l,t) -> tuple of child ids
    step_count: int = 0

    def subnet_ids(self):
        return sorted(self.per_subnet_flows.keys())

    def children_of(self, sid) -> tuple:
        return self.traversed.get(sid, ())

    def recount_steps(self) -> None:
        self.step_count = sum(
            c for flows in self.per_subnet_flows.values() for c in flows.values()
        )

    def total_flow(self, net: HierNetwork) -> np.ndarray:
        x = np.zeros(net.n_arcs)
        for flows in self.per_subnet_flows.values():
            for arc, count in flows.items():
                x[arc] += count
        return x

    def copy(self) -> "HierWalk":
        return HierWalk(
            {sid: dict(f) for sid, f in self.per_subnet_flows.items()},
            {sid: tuple(k) for sid, k in self.traversed.items()},
            self.step_count,
        )


def subnet_fragment(net: HierNetwork, sid: tuple, children: list[tuple]) -> dict:
    """Flow through an internal subnetwork visiting the given children in
    order.  Only this subnetwork's own arcs carry flow; the hop across each
    child happens inside the child."""
    sub = net.subnets[sid]
    flows: dict = {}

    def add(tail, head):
        arc = net.arc_between(tail, head)
        flows[arc] = flows.get(arc, 0) + 1

    if not children:
        add(sub.s_node, sub.e_node)
        return flows
    prev_exit = sub.s_node
    for cid in children:
        cs, ce = net.boundary(cid)
        add(prev_exit, cs)
        prev_exit = ce
    add(prev_exit, sub.e_node)
    return flows


def leaf_fragment(net: HierNetwork, sid: tuple, visits: list[tuple[str, int]]) -> dict:
    """Flow through a bottom-level subnetwork doing the listed activities.

    ``visits`` is an ordered list of (activity code, repeat count >= 1); codes
    must appear in canonical order.  Repeats use the back arc from the
    activity end node to its start node.
    """
    sub = net.subnets[sid]
    flows: dict = {}

    def add(tail, head, k=1):
        arc = net.arc_between(tail, head)
        flows[arc] = flows.get(arc, 0) + k

    if not visits:
        add(sub.s_node, sub.e_node)
        return flows
    acts = {a.code: a for a in sub.activities}
    order = {a.code: i for i, a in enumerate(sub.activities)}
    last = -1
    prev_exit = sub.s_node
    for code, count in visits:
        if code not in acts:
            raise InputError(f"activity {code!r} not in subnet {sid}")
        if order[code] <= last:
            raise InputError(f"activities out of canonical order in subnet {sid}")
        if count < 1:
            raise InputError("repeat count must be >= 1")
        last = order[code]
        a = acts[code]
        add(prev_exit, a.start_node)
        add(a.start_node, a.end_node, count)
        if count > 1:
            add(a.end_node, a.start_node, count - 1)
        prev_exit = a.end_node
    add(prev_exit, sub.e_node)
    return flows


def validate_walk(net: HierNetwork, walk: HierWalk, tol: float = 1e-9) -> None:
    """Check per-subnetwork flow balance and mask containment."""
    for sid, flows in walk.per_subnet_flows.items():
        if sid not in net.subnets:
            raise InputError(f"walk references unknown subnet {sid}")
        own = set(net.arc_ids.get(sid, ()))
        balance: dict = {}
        for arc_idx, count in flows.items():
            if arc_idx not in own:
                raise InputError(f"walk uses arc {arc_idx} outside subnet {sid}")
            if count < 0:
                raise InputError("negative flow")
            arc = net.arcs[arc_idx]
            balance[arc.tail] = balance.get(arc.tail, 0) + count
            balance[arc.head] = balance.get(arc.head, 0) - count
        sub = net.subnets[sid]
        expected = {sub.s_node: 1, sub.e_node: -1}
        for cid in walk.children_of(sid):
            cs, ce = net.boundary(cid)
            expected[cs] = expected.get(cs, 0) - 1
            expected[ce] = expected.get(ce, 0) + 1
        for node in set(balance) | set(expected):
            if balance.get(node, 0) != expected.get(node, 0):
                raise InputError(
                    f"flow imbalance at node {node} in subnet {sid}: "
                    f"{balance.get(node, 0)} != {expected.get(node, 0)}"
                )
        for cid in walk.children_of(sid):
            if cid not in walk.per_subnet_flows:
                raise InputError(f"child {cid} marked traversed but has no flow")


def arc_sequence(net: HierNetwork, walk: HierWalk) -> list[int]:
    """Ordered arc indices of the flattened walk (hierarchical in-order).

    Repeat arcs are consumed before the walk moves past an activity, making
    the traversal an Eulerian walk of the per-subnetwork flow.
    """

    def seq_for(sid) -> list[int]:
        flows = dict(walk.per_subnet_flows.get(sid, {}))
        sub = net.subnets[sid]
        child_at = {net.boundary(c)[0]: c for c in walk.children_of(sid)}
        out: list[int] = []
        node = sub.s_node
        while node != sub.e_node:
            if node in child_at:
                cid = child_at.pop(node)
                out.extend(seq_for(cid))
                node = net.boundary(cid)[1]
                continue
            cand = sorted(
                (a for a in flows if flows[a] > 0 and net.arcs[a].tail == node),
                key=lambda a: (net.arcs[a].kind != "repeat", a),
            )
            if not cand:
                raise InputError(f"walk flow in subnet {sid} is not a connected path")
            arc = cand[0]
            flows[arc] -= 1
            out.append(arc)
            node = net.arcs[arc].head
        if any(c > 0 for c in flows.values()) or child_at:
            raise InputError(f"walk flow in subnet {sid} has disconnected parts")
        return out

    return seq_for(ROOT)
