"""Hierarchical care-network data model.

A network has L+1 levels: level 0 is the whole network with artificial start
and end nodes, levels 1..L-1 hold nested subnetworks, and level L holds the
clinical activities, each expanded into a start/end node pair so that doing
the activity is the arc between them.  Subnetworks are ordered: flow may only
move forward through siblings, and within a bottom-level subnetwork the
activities are visited in a fixed canonical order (repeats allowed through a
back arc from the activity's end node to its start node).

Networks are built from a declarative requirement tree in which every node
carries a concordance label (mandatory / optional / discordant / alternative
mandatory / alternative optional).  Built networks are immutable and safe for
concurrent reads.

Deterministic ordering
----------------------
Nodes: subnet boundary pairs first, level-major then sibling order
(``s`` before ``e``), followed by activity start/end pairs in leaf order then
canonical activity order.  Arcs: grouped by owning subnet (level-major,
sibling-minor), ordered by (tail index, head index) within the group.  The
incidence matrix drops the row of the global end node, which is always node 1.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InputError, SpecError

LABELS = ("M", "O", "D", "AM", "AO")
_LABEL_ALIASES = {
    "m": "M", "mandatory": "M",
    "o": "O", "optional": "O",
    "d": "D", "discordant": "D",
    "am": "AM", "alternative mandatory": "AM", "alternative_mandatory": "AM",
    "ao": "AO", "alternative optional": "AO", "alternative_optional": "AO",
}

ROOT = (0, 1)

FORMAT_REQUIREMENTS = "careconcord/requirements"
FORMAT_NETWORK = "careconcord/network"


def parse_label(raw) -> str:
    try:
        return _LABEL_ALIASES[str(raw).strip().lower()]
    except KeyError:
        raise SpecError(f"unknown label {raw!r}; expected one of {LABELS}")


# ---------------------------------------------------------------------------
# Requirement specification (the declarative input tree)


@dataclass
class ActivitySpec:
    code: str
    label: str
    order: int
    group: str | None = None
    catchall: bool = False


@dataclass
class SpecNode:
    """One subnetwork-to-be in the requirement tree."""

    name: str
    label: str
    children: list["SpecNode"] = field(default_factory=list)
    activities: list[ActivitySpec] = field(default_factory=list)
    when: str | None = None       # branch-selection condition for mapping
    group: str | None = None      # explicit AM/AO group key
    role: str | None = None       # diagnosis/neoadjuvant/surgery/adjuvant/continual
    continual: bool = False

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class RequirementSpec:
    subgroup_id: str
    sections: list[SpecNode]
    skip_arcs: bool = True

    def depth(self) -> int:
        """Level index L of the activities (subnets occupy levels 0..L-1)."""
        return 1 + max(_subtree_depth(s) for s in self.sections)

    def validate(self) -> None:
        depth = self.depth()

        def walk(node: SpecNode, level: int) -> None:
            allowed = _allowed_labels(level, depth)
            if node.label not in allowed:
                raise SpecError(
                    f"label {node.label} not allowed at level {level} "
                    f"(node {node.name!r}); allowed: {sorted(allowed)}"
                )
            if node.is_leaf:
                if not node.activities:
                    raise SpecError(f"leaf subnet {node.name!r} lists no activities")
                codes = [a.code for a in node.activities]
                if len(set(codes)) != len(codes):
                    raise SpecError(f"duplicate activity codes in subnet {node.name!r}")
                act_level = level + 1
                act_allowed = _allowed_labels(act_level, depth)
                for a in node.activities:
                    if a.label not in act_allowed:
                        raise SpecError(
                            f"label {a.label} not allowed for activity {a.code!r} "
                            f"at level {act_level}"
                        )
                _check_groups([(a.label, a.group, a.code) for a in node.activities])
            else:
                for c in node.children:
                    walk(c, level + 1)
                _check_groups([(c.label, c.group, c.name) for c in node.children])
                if len({_subtree_depth(c) for c in node.children}) != 1:
                    raise SpecError(f"children of {node.name!r} have uneven depth")

        if not self.sections:
            raise SpecError("requirement spec has no sections")
        if len({_subtree_depth(s) for s in self.sections}) != 1:
            raise SpecError("sections have uneven depth")
        _check_groups([(s.label, s.group, s.name) for s in self.sections])
        for s in self.sections:
            walk(s, 1)


def _subtree_depth(node: SpecNode) -> int:
    """Subnet levels spanned by this subtree (a leaf spans one level)."""
    if node.is_leaf:
        return 1
    return 1 + max(_subtree_depth(c) for c in node.children)


def _allowed_labels(level: int, depth: int) -> set:
    if depth == 4:
        # breast-cancer shape: alternatives occur at level 2 and level 4 only
        if level in (2, 4):
            return set(LABELS)
        return {"M", "O", "D"}
    if level == 1:
        return {"M", "O", "D"}
    return set(LABELS)


def sibling_groups(items: list[tuple[str, str | None]]) -> list[list[int]]:
    """Partition sibling indices into label-algebra units.

    Returns a list of index groups: singletons for M/O/D members, one group
    per AM/AO run.  A run is a maximal block of consecutive siblings with the
    same alternative label, unless an explicit group key joins them.
    """
    out: list[list[int]] = []
    explicit: dict = {}
    prev_run: tuple | None = None    # (label, out index) of an open implicit run
    for i, (label, grp) in enumerate(items):
        if label in ("AM", "AO"):
            if grp is not None:
                key = (label, grp)
                if key in explicit:
                    out[explicit[key]].append(i)
                else:
                    out.append([i])
                    explicit[key] = len(out) - 1
                prev_run = None
            elif prev_run is not None and prev_run[0] == label:
                out[prev_run[1]].append(i)
            else:
                out.append([i])
                prev_run = (label, len(out) - 1)
        else:
            out.append([i])
            prev_run = None
    return out


def _check_groups(items) -> None:
    """AM groups must have at least 2 mutually exclusive members."""
    labels = [(lab, grp) for lab, grp, _name in items]
    names = [name for _lab, _grp, name in items]
    for group in sibling_groups(labels):
        if labels[group[0]][0] == "AM" and len(group) < 2:
            raise SpecError(
                f"alternative-mandatory group {[names[i] for i in group]} "
                f"has fewer than 2 members"
            )


# -- mapping-time branch conditions ----------------------------------------

_ATOM_RE = re.compile(r"^\s*(\w+)\s*==\s*(\w+)\s*$")


def eval_condition(expr: str | None, attrs: dict) -> bool:
    """Evaluate a tiny condition grammar: ``a == x``, joined by and/or.

    ``or`` binds looser than ``and``.  Unknown attributes evaluate False.
    """
    if expr is None:
        return True
    for disjunct in expr.split(" or "):
        ok = True
        for atom in disjunct.split(" and "):
            m = _ATOM_RE.match(atom)
            if not m:
                raise SpecError(f"cannot parse condition {expr!r}")
            ok = ok and str(attrs.get(m.group(1))) == m.group(2)
        if ok:
            return True
    return False


# ---------------------------------------------------------------------------
# Catch-all configuration


@dataclass
class CatchallConfig:
    """Where observed-but-unlisted activities go.

    One discordant catch-all activity per category is appended after the
    listed activities of every bottom-level subnetwork.
    """

    categories: tuple[str, ...] = ("extra_imaging", "extra_consultation", "ed_visit")
    rules: tuple[tuple[str, str], ...] = (
        (r"imag|scan|mri|ct|ultra|xray|x_ray|mammo|ducto|pet", "extra_imaging"),
        (r"consult", "extra_consultation"),
        (r"^ed_|emerg", "ed_visit"),
    )
    codes: dict = field(default_factory=dict)
    default_category: str = "extra_consultation"

    def category_of(self, code: str) -> str:
        if code in self.codes:
            return self.codes[code]
        low = code.lower()
        for pattern, cat in self.rules:
            if re.search(pattern, low):
                return cat
        return self.default_category

    @classmethod
    def none(cls) -> "CatchallConfig":
        return cls(categories=(), rules=(), default_category="")


# ---------------------------------------------------------------------------
# Built network


@dataclass(frozen=True)
class Activity:
    code: str
    label: str
    order: int
    start_node: int
    end_node: int
    catchall: bool = False
    group: str | None = None


@dataclass
class Subnet:
    level: int
    t: int                      # 1-based index within the level, global
    name: str
    label: str
    parent: tuple | None
    children: list[tuple] = field(default_factory=list)
    s_node: int = -1
    e_node: int = -1
    activities: list[Activity] = field(default_factory=list)
    when: str | None = None
    group: str | None = None
    role: str | None = None
    continual: bool = False

    @property
    def id(self) -> tuple:
        return (self.level, self.t)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class Node:
    index: int
    name: str
    kind: str                   # subnet_start / subnet_end / act_start / act_end
    subnet: tuple


@dataclass(frozen=True)
class Arc:
    index: int
    tail: int
    head: int
    owner: tuple                # subnet id whose arc set contains this arc
    kind: str                   # entry / exit / sibling / skip / activity / repeat


@dataclass
class IncidenceView:
    """Flat view for the inverse solvers: node-arc incidence with the global
    end-node row dropped, supply vector, and arc ownership."""

    matrix: np.ndarray          # (m-1) x n
    supply: np.ndarray          # +1 at the global start node's row
    arc_owner: list
    node_rows: np.ndarray       # node index -> row (-1 for the dropped node)


class HierNetwork:
    def __init__(self, levels: int, subnets: dict, nodes: list, arcs: list,
                 skip_arcs: bool, subgroup_id: str):
        self.L = levels                      # activities live at level L
        self.subnets = subnets               # (l,t) -> Subnet
        self.nodes = nodes
        self.arcs = arcs
        self.skip_arcs = skip_arcs
        self.subgroup_id = subgroup_id
        self.arc_ids: dict = {}
        for arc in arcs:
            self.arc_ids.setdefault(arc.owner, []).append(arc.index)
        self._incidence: IncidenceView | None = None
        self._arc_index: dict = {(a.tail, a.head): a.index for a in arcs}

    # -- basic accessors ----------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @property
    def root(self) -> Subnet:
        return self.subnets[ROOT]

    def subnet_ids(self):
        return sorted(self.subnets.keys())

    def level_ids(self, level: int):
        return [sid for sid in self.subnet_ids() if sid[0] == level]

    def arc_between(self, tail: int, head: int) -> int:
        try:
            return self._arc_index[(tail, head)]
        except KeyError:
            raise InputError(f"no arc from node {tail} to node {head}")

    def boundary(self, sid: tuple) -> tuple:
        sub = self.subnets[sid]
        return sub.s_node, sub.e_node

    def dual_diff(self, p: np.ndarray, sid: tuple) -> float:
        """b_(l,t)' p with the dropped end-node row treated as zero."""
        s, e = self.boundary(sid)
        rows = self.incidence().node_rows
        val = 0.0
        if rows[s] >= 0:
            val += p[rows[s]]
        if rows[e] >= 0:
            val -= p[rows[e]]
        return val

    def activity_arc(self, sid: tuple, code: str) -> int:
        sub = self.subnets[sid]
        for a in sub.activities:
            if a.code == code:
                return self.arc_between(a.start_node, a.end_node)
        raise InputError(f"activity {code!r} not in subnet {sid}")

    # -- incidence ----------------------------------------------------------

    def incidence(self) -> IncidenceView:
        if self._incidence is None:
            m, n = self.n_nodes, self.n_arcs
            rows = np.empty(m, dtype=int)
            drop = self.root.e_node  # always node 1
            r = 0
            for i in range(m):
                if i == drop:
                    rows[i] = -1
                else:
                    rows[i] = r
                    r += 1
            A = np.zeros((m - 1, n))
            for arc in self.arcs:
                if rows[arc.tail] >= 0:
                    A[rows[arc.tail], arc.index] += 1.0
                if rows[arc.head] >= 0:
                    A[rows[arc.head], arc.index] -= 1.0
            b = np.zeros(m - 1)
            b[rows[self.root.s_node]] = 1.0
            owner = [None] * n
            for arc in self.arcs:
                owner[arc.index] = arc.owner
            self._incidence = IncidenceView(A, b, owner, rows)
        return self._incidence

    def flatten(self) -> IncidenceView:
        return self.incidence()

    # -- structural checks --------------------------------------------------

    def check_invariants(self) -> None:
        owned = sorted(i for ids in self.arc_ids.values() for i in ids)
        if owned != list(range(self.n_arcs)):
            raise SpecError("arc ownership does not partition the arc set")
        for sid in self.subnet_ids():
            if not self._local_reachable(sid):
                raise SpecError(f"subnet {sid} admits no path from start to end")

    def _local_reachable(self, sid: tuple) -> bool:
        sub = self.subnets[sid]
        adj: dict = {}
        for i in self.arc_ids.get(sid, []):
            arc = self.arcs[i]
            adj.setdefault(arc.tail, []).append(arc.head)
        for child in sub.children:
            cs, ce = self.boundary(child)
            adj.setdefault(cs, []).append(ce)  # traversing the child
        seen = {sub.s_node}
        stack = [sub.s_node]
        while stack:
            v = stack.pop()
            if v == sub.e_node:
                return True
            for w in adj.get(v, []):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return False

    # -- serialization --------------------------------------------------------

    def dump(self, path) -> None:
        write_network(self, path)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arc in self.arcs:
            h.update(f"{arc.index}:{arc.tail}>{arc.head}:{arc.owner}\n".encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Building


def build_network(spec: RequirementSpec, catchall: CatchallConfig | None = None) -> HierNetwork:
    """Construct the hierarchical network for a requirement tree.

    Every node of the tree becomes a subnetwork, including discordant ones
    (patients may still traverse them).  Each bottom-level subnetwork gets one
    discordant catch-all activity per configured category, appended after the
    listed activities.
    """
    spec.validate()
    if catchall is None:
        catchall = CatchallConfig()
    L = spec.depth()

    subnets: dict = {}
    root = Subnet(level=0, t=1, name="root", label="M", parent=None)
    subnets[ROOT] = root

    # level-major id assignment, siblings kept in spec order
    frontier = [(root, s) for s in spec.sections]
    level = 1
    while frontier:
        nxt = []
        t = 0
        for parent, node in frontier:
            t += 1
            sub = Subnet(
                level=level, t=t, name=node.name, label=node.label,
                parent=parent.id, when=node.when, group=node.group,
                role=node.role, continual=node.continual,
            )
            subnets[sub.id] = sub
            parent.children.append(sub.id)
            if node.is_leaf:
                sub.activities = _activity_list(node, catchall)
            else:
                nxt.extend((sub, c) for c in node.children)
        frontier = nxt
        level += 1

    # nodes: subnet boundary pairs in (level, t) order, then activity pairs
    nodes: list = []

    def add_node(name: str, kind: str, sid: tuple) -> int:
        nodes.append(Node(len(nodes), name, kind, sid))
        return len(nodes) - 1

    for sid in sorted(subnets):
        sub = subnets[sid]
        sub.s_node = add_node(f"s[{sid[0]},{sid[1]}]", "subnet_start", sid)
        sub.e_node = add_node(f"e[{sid[0]},{sid[1]}]", "subnet_end", sid)
    for sid in sorted(subnets):
        sub = subnets[sid]
        if sub.is_leaf:
            fixed = []
            for a in sub.activities:
                s = add_node(f"{a.code}.s[{sid[0]},{sid[1]}]", "act_start", sid)
                e = add_node(f"{a.code}.e[{sid[0]},{sid[1]}]", "act_end", sid)
                fixed.append(Activity(a.code, a.label, a.order, s, e, a.catchall, a.group))
            sub.activities = fixed

    # arcs, grouped by owner, (tail, head)-sorted within the owner
    arcs: list = []
    for sid in sorted(subnets):
        sub = subnets[sid]
        cand: list = []
        if sub.is_leaf:
            acts = sub.activities
            for i, a in enumerate(acts):
                cand.append((sub.s_node, a.start_node, "entry"))
                cand.append((a.start_node, a.end_node, "activity"))
                cand.append((a.end_node, a.start_node, "repeat"))
                cand.append((a.end_node, sub.e_node, "exit"))
                for b in acts[i + 1:]:
                    cand.append((a.end_node, b.start_node, "sibling"))
        else:
            kids = [subnets[c] for c in sub.children]
            for i, k in enumerate(kids):
                cand.append((sub.s_node, k.s_node, "entry"))
                cand.append((k.e_node, sub.e_node, "exit"))
                for k2 in kids[i + 1:]:
                    cand.append((k.e_node, k2.s_node, "sibling"))
        if spec.skip_arcs:
            cand.append((sub.s_node, sub.e_node, "skip"))
        for tail, head, kind in sorted(cand):
            arcs.append(Arc(len(arcs), tail, head, sid, kind))

    net = HierNetwork(L, subnets, nodes, arcs, spec.skip_arcs, spec.subgroup_id)
    net.check_invariants()
    return net


def _activity_list(node: SpecNode, catchall: CatchallConfig) -> list:
    acts = sorted(node.activities, key=lambda a: (a.order,))
    listed = {a.code for a in acts}
    out = [Activity(a.code, a.label, a.order, -1, -1, False, a.group) for a in acts]
    next_order = max((a.order for a in acts), default=0) + 1
    for cat in catchall.categories:
        if cat in listed:
            raise SpecError(f"catch-all category {cat!r} collides with a listed code")
        out.append(Activity(cat, "D", next_order, -1, -1, True, None))
        next_order += 1
    return out


# ---------------------------------------------------------------------------
# Requirement file IO


def load_requirements(path) -> RequirementSpec:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise InputError(f"{path}: not a mapping")
    _check_format(raw.get("format"), FORMAT_REQUIREMENTS, path)

    def parse_activity(entry, pos: int) -> ActivitySpec:
        if not isinstance(entry, dict) or "code" not in entry:
            raise SpecError(f"{path}: bad activity entry {entry!r}")
        return ActivitySpec(
            code=str(entry["code"]),
            label=parse_label(entry.get("label", "M")),
            order=int(entry.get("order", pos)),
            group=entry.get("group"),
        )

    def parse_node(entry) -> SpecNode:
        if not isinstance(entry, dict) or "name" not in entry:
            raise SpecError(f"{path}: bad subnet entry {entry!r}")
        node = SpecNode(
            name=str(entry["name"]),
            label=parse_label(entry.get("label", "M")),
            when=entry.get("when"),
            group=entry.get("group"),
            role=entry.get("role"),
            continual=bool(entry.get("continual", False)),
        )
        kids = entry.get("children")
        acts = entry.get("activities")
        if kids and acts:
            raise SpecError(f"{path}: {node.name!r} has both children and activities")
        if kids:
            node.children = [parse_node(k) for k in kids]
        elif acts:
            node.activities = [parse_activity(a, i + 1) for i, a in enumerate(acts)]
        else:
            raise SpecError(f"{path}: {node.name!r} has neither children nor activities")
        return node

    sections = [parse_node(s) for s in raw.get("sections", [])]
    spec = RequirementSpec(
        subgroup_id=str(raw.get("subgroup", "unknown")),
        sections=sections,
        skip_arcs=bool(raw.get("skip_arcs", True)),
    )
    for sec in spec.sections:
        if sec.role is None:
            sec.role = _default_role(sec.name)
    spec.validate()
    return spec


def _default_role(name: str) -> str | None:
    low = name.lower().replace("-", "").replace("_", "").replace(" ", "")
    for role in ("diagnosis", "neoadjuvant", "surgery", "adjuvant", "continual"):
        if low.startswith(role):
            return role
    return None


def _check_format(line, expected: str, path) -> None:
    if line is None:
        return
    parts = str(line).split()
    if not parts or parts[0] != expected:
        raise InputError(f"{path}: unexpected format {line!r}, expected {expected}")
    if len(parts) > 1 and not parts[1].startswith("v1"):
        raise InputError(f"{path}: unsupported major version {parts[1]!r}")


# ---------------------------------------------------------------------------
# Network dump / load (structured text, versioned)


def write_network(net: HierNetwork, path) -> None:
    lines = [f"# format: {FORMAT_NETWORK} v1"]
    lines.append(f"meta levels={net.L} skip_arcs={int(net.skip_arcs)} "
                 f"subgroup={net.subgroup_id}")
    lines.append("[subnets]")
    lines.append("# level t name label parent when group role continual s_node e_node")
    for sid in net.subnet_ids():
        sub = net.subnets[sid]
        parent = f"{sub.parent[0]},{sub.parent[1]}" if sub.parent else "-"
        lines.append("\t".join([
            str(sub.level), str(sub.t), sub.name, sub.label, parent,
            sub.when or "-", sub.group or "-", sub.role or "-",
            str(int(sub.continual)), str(sub.s_node), str(sub.e_node),
        ]))
    lines.append("[activities]")
    lines.append("# level t code label order start end catchall group")
    for sid in net.subnet_ids():
        for a in net.subnets[sid].activities:
            lines.append("\t".join([
                str(sid[0]), str(sid[1]), a.code, a.label, str(a.order),
                str(a.start_node), str(a.end_node), str(int(a.catchall)),
                a.group or "-",
            ]))
    lines.append("[nodes]")
    lines.append("# index name kind level t")
    for nd in net.nodes:
        lines.append("\t".join([str(nd.index), nd.name, nd.kind,
                                str(nd.subnet[0]), str(nd.subnet[1])]))
    lines.append("[arcs]")
    lines.append("# index tail head owner_level owner_t kind")
    for arc in net.arcs:
        lines.append("\t".join([str(arc.index), str(arc.tail), str(arc.head),
                                str(arc.owner[0]), str(arc.owner[1]), arc.kind]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_network(path) -> HierNetwork:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# format:"):
        raise InputError(f"{path}: missing format header")
    _check_format(text[0].split(":", 1)[1].strip(), FORMAT_NETWORK, path)

    meta = {}
    section = None
    subnets: dict = {}
    nodes: list = []
    arcs: list = []
    acts: dict = {}
    for line in text[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("meta "):
            for kv in line[5:].split():
                k, v = kv.split("=", 1)
                meta[k] = v
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        f = line.split("\t")
        if section == "subnets":
            sid = (int(f[0]), int(f[1]))
            parent = None if f[4] == "-" else tuple(int(x) for x in f[4].split(","))
            sub = Subnet(
                level=sid[0], t=sid[1], name=f[2], label=f[3], parent=parent,
                when=None if f[5] == "-" else f[5],
                group=None if f[6] == "-" else f[6],
                role=None if f[7] == "-" else f[7],
                continual=bool(int(f[8])),
            )
            sub.s_node, sub.e_node = int(f[9]), int(f[10])
            subnets[sid] = sub
        elif section == "activities":
            sid = (int(f[0]), int(f[1]))
            acts.setdefault(sid, []).append(Activity(
                f[2], f[3], int(f[4]), int(f[5]), int(f[6]), bool(int(f[7])),
                None if f[8] == "-" else f[8],
            ))
        elif section == "nodes":
            nodes.append(Node(int(f[0]), f[1], f[2], (int(f[3]), int(f[4]))))
        elif section == "arcs":
            arcs.append(Arc(int(f[0]), int(f[1]), int(f[2]),
                            (int(f[3]), int(f[4])), f[5]))
    for sid, sub in subnets.items():
        sub.activities = acts.get(sid, [])
        if sub.parent is not None:
            subnets[sub.parent].children.append(sid)
    for sub in subnets.values():
        sub.children.sort()
    net = HierNetwork(
        int(meta["levels"]), subnets, nodes, arcs,
        bool(int(meta["skip_arcs"])), meta.get("subgroup", "unknown"),
    )
    net.check_invariants()
    return net
