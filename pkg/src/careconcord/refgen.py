"""Enumeration of per-subnetwork reference pathway fragments.

Each subnetwork's recommended traversals follow directly from the labels of
its elements: mandatory elements appear in every fragment, discordant ones in
none, optional ones generate the full presence/absence product, each
alternative-mandatory group contributes exactly one member, and each
alternative-optional group at most one.  Fragments never cross subnetwork
boundaries; combining them across levels is intentionally avoided because the
cross-level product explodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product

from .errors import InputError, SpecError
from .hiernet import HierNetwork, sibling_groups
from .walks import leaf_fragment, subnet_fragment

log = logging.getLogger(__name__)

DEFAULT_FRAGMENT_CAP = 10 ** 6


@dataclass
class Fragment:
    """One reference traversal of a single subnetwork."""

    sid: tuple
    flows: dict                      # arc index -> count on this subnet's arcs
    children: tuple = ()             # traversed child subnet ids, in order
    activities: tuple = ()           # traversed activity codes (leaf subnets)

    def elements(self, net: HierNetwork) -> tuple:
        if self.activities:
            return self.activities
        return tuple(net.subnets[c].name for c in self.children)


@dataclass
class ReferenceSet:
    per_subnet: dict = field(default_factory=dict)   # (l,t) -> [Fragment]
    hollow: set = field(default_factory=set)          # subnets with no concordant content

    def fragments(self, sid) -> list:
        return self.per_subnet.get(sid, [])

    def count(self) -> int:
        return sum(len(v) for v in self.per_subnet.values())

    def all_items(self):
        for sid in sorted(self.per_subnet):
            for q, frag in enumerate(self.per_subnet[sid]):
                yield sid, q, frag


def expected_count(labels: list[tuple[str, str | None]]) -> int:
    """Fragment count implied by the label algebra alone."""
    total = 1
    for group in sibling_groups(labels):
        label = labels[group[0]][0]
        if label == "O":
            total *= 2
        elif label == "AM":
            total *= len(group)
        elif label == "AO":
            total *= 1 + len(group)
    return total


def enumerate_refs(net: HierNetwork, cap: int = DEFAULT_FRAGMENT_CAP) -> ReferenceSet:
    """Enumerate reference fragments for every subnetwork of the network.

    Works bottom-up so that optional children with no concordant content of
    their own (only-discordant subtrees) can be demoted to absent-only in
    their parent's enumeration; such children are reported in ``hollow``.
    """
    refs = ReferenceSet()
    for sid in sorted(net.subnets.keys(), reverse=True):
        sub = net.subnets[sid]
        if sub.is_leaf:
            selections = _selections(
                [(a.label, a.group) for a in sub.activities], sid, cap, set(),
            )
            frags = []
            for chosen in selections:
                codes = tuple(sub.activities[i].code for i in chosen)
                if not codes and not net.skip_arcs:
                    continue
                frags.append(Fragment(
                    sid,
                    leaf_fragment(net, sid, [(c, 1) for c in codes]),
                    activities=codes,
                ))
        else:
            hollow_children = {
                i for i, cid in enumerate(sub.children) if cid in refs.hollow
            }
            selections = _selections(
                [(net.subnets[c].label, net.subnets[c].group) for c in sub.children],
                sid, cap, hollow_children,
            )
            frags = []
            for chosen in selections:
                kids = tuple(sub.children[i] for i in chosen)
                if not kids and not net.skip_arcs:
                    continue
                frags.append(Fragment(
                    sid, subnet_fragment(net, sid, list(kids)), children=kids,
                ))
        if not frags:
            log.warning("subnet %s has no reference fragments", sid)
        refs.per_subnet[sid] = frags
        if _is_hollow(frags):
            refs.hollow.add(sid)
            if net.subnets[sid].label == "O":
                log.warning(
                    "optional subnet %s (%s) has no concordant content; "
                    "treated as absent-only in its parent's references",
                    sid, net.subnets[sid].name,
                )
    return refs


def _is_hollow(frags: list) -> bool:
    return all(not f.children and not f.activities for f in frags)


def _selections(labels, sid, cap, hollow: set):
    """Index subsets implied by the label algebra, in deterministic order."""
    groups = sibling_groups(labels)
    choice_lists = []
    for group in groups:
        label = labels[group[0]][0]
        if label == "M":
            choice_lists.append([group])
        elif label == "D":
            choice_lists.append([[]])
        elif label == "O":
            if group[0] in hollow:
                choice_lists.append([[]])
            else:
                choice_lists.append([[], group])
        elif label == "AM":
            options = [[i] for i in group if i not in hollow]
            if not options:
                raise SpecError(
                    f"alternative-mandatory group in subnet {sid} is empty "
                    f"after filtering"
                )
            choice_lists.append(options)
        elif label == "AO":
            choice_lists.append([[]] + [[i] for i in group if i not in hollow])
        else:
            raise SpecError(f"unknown label {label!r} in subnet {sid}")
    count = 1
    for cl in choice_lists:
        count *= len(cl)
    if count > cap:
        raise InputError(
            f"subnet {sid} would generate {count} reference fragments "
            f"(cap {cap})"
        )
    out = []
    for combo in product(*choice_lists):
        chosen = sorted(i for part in combo for i in part)
        out.append(chosen)
    return out


def dump_refs(net: HierNetwork, refs: ReferenceSet) -> str:
    """Text dump: fragments as ordered element lists, grouped by subnetwork."""
    lines = ["# format: careconcord/refs v1"]
    for sid in sorted(refs.per_subnet):
        sub = net.subnets[sid]
        frags = refs.per_subnet[sid]
        lines.append(f"[{sid[0]},{sid[1]}] {sub.name} ({len(frags)} fragments)")
        for frag in frags:
            elems = frag.elements(net)
            lines.append("  " + (" -> ".join(elems) if elems else "(pass through)"))
    return "\n".join(lines) + "\n"
