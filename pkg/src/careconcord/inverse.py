"""Inverse shortest-path cost learning on a hierarchical network.

Stage 1 finds arc costs and node potentials minimizing the sum of squared
duality gaps of all reference fragments, subject to dual feasibility, the
unit max-norm normalization of the cost vector, and the requirement that the
cost vector be a circulation (flow-conserving at every node), which strips
the component of cost space that is constant across all feasible flows.

The max-norm equality is nonconvex.  It is handled by enumerating candidate
normalizations (arc j pinned to +1 or -1), seeded and pruned with a convex
relaxation: a feasibility push that looks for a zero-gap cost vector while
maximizing total cost on discordant arcs.  When the push succeeds, rescaling
its solution to unit max norm is already globally optimal (zero objective),
so no per-candidate solve is needed; otherwise candidates are enumerated
against the relaxation bound.

Stage 2 re-optimizes within the stage-1 optimal face (duality gaps pinned),
pushing gaps of surviving patients' walks down and gaps of deceased patients'
walks up, with per-level weights that compensate for class imbalance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import InputError, SolverError
from .hiernet import FORMAT_NETWORK, HierNetwork
from .qp import ConvexProgram, solve
from .refgen import ReferenceSet
from .walks import HierWalk

log = logging.getLogger(__name__)

FORMAT_COSTS = "careconcord/costs"
ZERO_GAP_TOL = 1e-7          # below this a duality gap counts as zero
FIT_TOL = 1e-10
STOP_REL = 1e-9


@dataclass
class CostSolution:
    c_star: np.ndarray
    p_star: np.ndarray
    eps_star: dict                     # (l, t, q) -> stage-1 duality gap
    normalization: tuple               # (arc index, sign)
    objective: float                   # stage-1 sum of squared gaps
    flags: tuple = ()

    def validate(self, net: HierNetwork, tol: float = ZERO_GAP_TOL) -> None:
        inc = net.incidence()
        slack = inc.matrix.T @ self.p_star - self.c_star
        if slack.max() > tol:
            raise SolverError(f"dual infeasibility {slack.max():.2e}")
        circ = np.abs(inc.matrix @ self.c_star).max()
        if circ > tol:
            raise SolverError(f"cost vector violates conservation by {circ:.2e}")
        j, sigma = self.normalization
        if abs(self.c_star[j] - sigma) > 1e-5 or np.abs(self.c_star).max() > 1 + 1e-6:
            raise SolverError("normalization not attained")
        if self.eps_star and min(self.eps_star.values()) < -tol:
            raise SolverError("negative stage-1 duality gap")


@dataclass
class CohortSplit:
    """Survived/died walk sets with per-level counts and imbalance weights.

    A walk contributes one pathway per subnetwork it traverses; counts are
    per level, and the weights are exact rationals so that
    alpha_l * S_l == B == beta_l * D_l holds identically.
    """

    survived: list = field(default_factory=list)
    died: list = field(default_factory=list)
    s_counts: dict = field(default_factory=dict)
    d_counts: dict = field(default_factory=dict)
    bottleneck: int = 0
    alpha: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)


def split_cohort(walks: list[HierWalk], outcomes: list[str]) -> CohortSplit:
    """Partition mapped walks by outcome ('survived' / 'died') and derive the
    per-level imbalance weights."""
    if len(walks) != len(outcomes):
        raise InputError("walks and outcomes differ in length")
    split = CohortSplit()
    for walk, outcome in zip(walks, outcomes):
        if outcome == "survived":
            split.survived.append(walk)
        elif outcome == "died":
            split.died.append(walk)
        else:
            raise InputError(f"unknown outcome {outcome!r}")
    for walk, counts in ((w, split.s_counts) for w in split.survived):
        for sid in walk.per_subnet_flows:
            counts[sid[0]] = counts.get(sid[0], 0) + 1
    for walk in split.died:
        for sid in walk.per_subnet_flows:
            split.d_counts[sid[0]] = split.d_counts.get(sid[0], 0) + 1
    levels = sorted(set(split.s_counts) | set(split.d_counts))
    totals = [split.s_counts.get(l, 0) + split.d_counts.get(l, 0) for l in levels]
    split.bottleneck = min(totals) if totals else 0
    for l in levels:
        s_l = split.s_counts.get(l, 0)
        d_l = split.d_counts.get(l, 0)
        split.alpha[l] = Fraction(split.bottleneck, s_l) if s_l else Fraction(0)
        split.beta[l] = Fraction(split.bottleneck, d_l) if d_l else Fraction(0)
    return split


# ---------------------------------------------------------------------------
# Program assembly


class _Blocks:
    """Shared constraint blocks over the variable layout [c | p | eps]."""

    def __init__(self, net: HierNetwork, refs: ReferenceSet):
        inc = net.incidence()
        self.net = net
        self.inc = inc
        self.n_c = net.n_arcs
        self.n_p = inc.matrix.shape[0]
        self.items = list(refs.all_items())       # [(sid, q, fragment)]
        self.n_eps = len(self.items)
        if self.n_eps == 0:
            raise InputError("reference set is empty")
        # dual feasibility  A'p - c <= 0
        self.G_dual = np.hstack([
            -np.eye(self.n_c), inc.matrix.T, np.zeros((self.n_c, self.n_eps)),
        ])
        # conservation  A c = 0
        self.E_circ = np.hstack([
            inc.matrix, np.zeros((self.n_p, self.n_p + self.n_eps)),
        ])
        # per-fragment strong duality rows
        self.E_gap = np.zeros((self.n_eps, self.n_c + self.n_p + self.n_eps))
        for r, (sid, _q, frag) in enumerate(self.items):
            self.E_gap[r, :self.n_c] = _flow_vector(self.n_c, frag.flows)
            self.E_gap[r, self.n_c:self.n_c + self.n_p] = self._dual_row(sid, frag.children)
            self.E_gap[r, self.n_c + self.n_p + r] = -1.0
        self.disc_arcs = _discordant_arcs(net)

    def _dual_row(self, sid: tuple, children) -> np.ndarray:
        """p-coefficients of sum_u b_u - b_(l,t)."""
        rows = self.inc.node_rows
        row = np.zeros(self.n_p)
        for cid in children:
            cs, ce = self.net.boundary(cid)
            if rows[cs] >= 0:
                row[rows[cs]] += 1.0
            if rows[ce] >= 0:
                row[rows[ce]] -= 1.0
        s, e = self.net.boundary(sid)
        if rows[s] >= 0:
            row[rows[s]] -= 1.0
        if rows[e] >= 0:
            row[rows[e]] += 1.0
        return row

    def walk_row(self, sid: tuple, walk: HierWalk) -> np.ndarray:
        """(c, p)-coefficients of the duality gap of a walk on one subnet."""
        row = np.zeros(self.n_c + self.n_p)
        row[:self.n_c] = _flow_vector(self.n_c, walk.per_subnet_flows[sid])
        row[self.n_c:] = self._dual_row(sid, walk.children_of(sid))
        return row

    def bounds(self, n_extra: int = 0):
        total = self.n_c + self.n_p + n_extra
        lb = np.full(total, -np.inf)
        ub = np.full(total, np.inf)
        lb[:self.n_c] = -1.0
        ub[:self.n_c] = 1.0
        return lb, ub


def _flow_vector(n: int, flows: dict) -> np.ndarray:
    v = np.zeros(n)
    for arc, count in flows.items():
        v[arc] = count
    return v


def _discordant_arcs(net: HierNetwork) -> np.ndarray:
    """Activity arcs of discordant-labeled activities (catch-alls included);
    these are the costs the relaxation push drives up."""
    out = []
    for sid in net.subnet_ids():
        for a in net.subnets[sid].activities:
            if a.label == "D":
                out.append(net.arc_between(a.start_node, a.end_node))
    return np.array(sorted(out), dtype=int)


# ---------------------------------------------------------------------------
# Stage 1


def fit_ref(net: HierNetwork, refs: ReferenceSet, sign_restrict: bool = False,
            tol: float = FIT_TOL, max_candidates: int | None = None) -> CostSolution:
    """Learn costs that make the reference fragments as optimal as possible."""
    blocks = _Blocks(net, refs)
    pushed = _push_solution(blocks, tol)
    if pushed is not None:
        c, p = pushed
        scale = np.abs(c).max()
        c = c / scale
        p = p / scale
        j = int(np.argmax(np.abs(c)))
        sigma = 1 if c[j] >= 0 else -1
        c[j] = float(sigma)  # exact unit norm at the anchor
        sol = _assemble(net, blocks, c, p, (j, sigma))
        sol.validate(net)
        return sol
    log.info("zero-gap relaxation infeasible; enumerating normalizations")
    return _enumerate_candidates(net, blocks, sign_restrict, tol, max_candidates)


def _push_solution(blocks: _Blocks, tol: float):
    """Zero-gap feasibility with discordant costs pushed up.

    Solves over (c, p) only: all duality gaps pinned to zero.  Falls back to
    pushing costs of arcs unused by any fragment when no discordant arcs
    exist.  Returns None when zero gaps are unattainable or the push only
    finds the zero vector.
    """
    nv = blocks.n_c + blocks.n_p
    E = np.vstack([
        blocks.E_circ[:, :nv],
        blocks.E_gap[:, :nv],
    ])
    f = np.zeros(E.shape[0])
    G = blocks.G_dual[:, :nv]
    push = blocks.disc_arcs
    if push.size == 0:
        used = set()
        for _sid, _q, frag in blocks.items:
            used.update(frag.flows)
        push = np.array([a for a in range(blocks.n_c) if a not in used], dtype=int)
    q1 = np.zeros(nv)
    if push.size:
        q1[push] = -1.0  # maximize their total cost
    lb, ub = blocks.bounds()
    lb, ub = lb[:nv], ub[:nv]
    res = solve(ConvexProgram(q2=np.zeros(nv), q1=q1, eq_mat=E, eq_rhs=f,
                              ineq_mat=G, ineq_rhs=np.zeros(G.shape[0]),
                              lb=lb, ub=ub), tol=tol, max_iter=200)
    if not res.optimal:
        return None
    c = res.x[:blocks.n_c]
    if np.abs(c).max() < 1e-6:
        return None
    return c, res.x[blocks.n_c:nv]


def _candidate_program(blocks: _Blocks, j: int, sigma: int) -> ConvexProgram:
    nv = blocks.n_c + blocks.n_p + blocks.n_eps
    norm_row = np.zeros((1, nv))
    norm_row[0, j] = 1.0
    E = np.vstack([blocks.E_circ, blocks.E_gap, norm_row])
    f = np.concatenate([np.zeros(blocks.E_circ.shape[0] + blocks.n_eps),
                        [float(sigma)]])
    q2 = np.zeros(nv)
    q2[blocks.n_c + blocks.n_p:] = 1.0
    lb, ub = blocks.bounds(blocks.n_eps)
    return ConvexProgram(q2=q2, q1=np.zeros(nv), eq_mat=E, eq_rhs=f,
                         ineq_mat=blocks.G_dual,
                         ineq_rhs=np.zeros(blocks.n_c), lb=lb, ub=ub)


def _enumerate_candidates(net, blocks: _Blocks, sign_restrict, tol,
                          max_candidates) -> CostSolution:
    # relaxation bound: best objective with the norm constraint dropped
    relax = solve(_relaxed_program(blocks), tol=tol, max_iter=200)
    bound = relax.objective if relax.optimal else 0.0
    c_seed = relax.x[:blocks.n_c] if relax.optimal else np.zeros(blocks.n_c)
    order = sorted(range(blocks.n_c), key=lambda a: (-abs(c_seed[a]), a))
    if max_candidates:
        order = order[:max_candidates]
    signs = [1] if sign_restrict else [1, -1]

    best = None
    n_solved = n_infeasible = 0
    for j in order:
        preferred = 1 if c_seed[j] >= 0 else -1
        for sigma in sorted(signs, key=lambda s: s != preferred):
            res = solve(_candidate_program(blocks, j, sigma), tol=tol, max_iter=200)
            if res.status == "infeasible":
                n_infeasible += 1
                continue
            if not res.optimal:
                continue
            n_solved += 1
            key = (res.objective, j, -sigma)
            if best is None or _better(key, best[0]):
                best = (key, res, j, sigma)
            if res.objective <= bound * (1 + STOP_REL) + 1e-12:
                break
        else:
            continue
        break
    if best is None:
        raise SolverError(
            f"all {n_infeasible} candidate normalizations infeasible "
            f"({n_solved} solved) on network {net.subgroup_id}"
        )
    _key, res, j, sigma = best
    c = res.x[:blocks.n_c]
    p = res.x[blocks.n_c:blocks.n_c + blocks.n_p]
    sol = _assemble(net, blocks, c, p, (j, sigma))
    sol.validate(net)
    return sol


def _better(key_a, key_b) -> bool:
    obj_a, j_a, s_a = key_a
    obj_b, j_b, s_b = key_b
    if abs(obj_a - obj_b) > 1e-12:
        return obj_a < obj_b
    return (j_a, s_a) < (j_b, s_b)


def _relaxed_program(blocks: _Blocks) -> ConvexProgram:
    nv = blocks.n_c + blocks.n_p + blocks.n_eps
    q2 = np.zeros(nv)
    q2[blocks.n_c + blocks.n_p:] = 1.0
    lb, ub = blocks.bounds(blocks.n_eps)
    return ConvexProgram(
        q2=q2, q1=np.zeros(nv),
        eq_mat=np.vstack([blocks.E_circ, blocks.E_gap]),
        eq_rhs=np.zeros(blocks.E_circ.shape[0] + blocks.n_eps),
        ineq_mat=blocks.G_dual, ineq_rhs=np.zeros(blocks.n_c), lb=lb, ub=ub,
    )


def _assemble(net, blocks: _Blocks, c, p, normalization) -> CostSolution:
    eps = {}
    obj = 0.0
    for (sid, q, frag) in blocks.items:
        gap = float(_flow_vector(blocks.n_c, frag.flows) @ c
                    + blocks._dual_row(sid, frag.children) @ p)
        if gap < 0:
            if gap < -ZERO_GAP_TOL:
                raise SolverError(f"negative fitted gap {gap:.2e} at {sid}")
            gap = 0.0
        eps[(sid[0], sid[1], q)] = gap
        obj += gap * gap
    return CostSolution(np.asarray(c, float), np.asarray(p, float), eps,
                        normalization, obj)


# ---------------------------------------------------------------------------
# Stage 2


def fit_pat(net: HierNetwork, refs: ReferenceSet, split: CohortSplit,
            sol: CostSolution, tol: float = 1e-9,
            delta_cap: float | None = None) -> CostSolution:
    """Refine the stage-1 costs to separate survived from died pathways.

    The duality-gap variables of patient walks are affine in (c, p), so they
    are substituted into the objective rather than materialized; the LP runs
    over (c, p) with the stage-1 gaps pinned, which confines the search to
    the stage-1 optimal set.
    """
    if not split.survived or not split.died:
        raise InputError("stage 2 needs at least one survived and one died walk")
    blocks = _Blocks(net, refs)
    nv = blocks.n_c + blocks.n_p
    eps_pin = np.array([sol.eps_star[(sid[0], sid[1], q)]
                        for sid, q, _f in blocks.items])
    j, sigma = sol.normalization
    norm_row = np.zeros((1, nv))
    norm_row[0, j] = 1.0
    E = np.vstack([blocks.E_circ[:, :nv], blocks.E_gap[:, :nv], norm_row])
    f = np.concatenate([np.zeros(blocks.E_circ.shape[0]), eps_pin, [float(sigma)]])

    q1 = np.zeros(nv)
    died_rows = []
    for walk in split.survived:
        for sid in walk.subnet_ids():
            q1 += float(split.alpha[sid[0]]) * blocks.walk_row(sid, walk)
    for walk in split.died:
        for sid in walk.subnet_ids():
            row = blocks.walk_row(sid, walk)
            died_rows.append(row)
            q1 -= float(split.beta[sid[0]]) * row

    lb, ub = blocks.bounds()
    lb, ub = lb[:nv], ub[:nv]
    G = blocks.G_dual[:, :nv]
    h = np.zeros(G.shape[0])
    prog = ConvexProgram(q2=np.zeros(nv), q1=q1, eq_mat=E, eq_rhs=f,
                         ineq_mat=G, ineq_rhs=h, lb=lb, ub=ub)
    res = solve(prog, tol=tol, max_iter=200)
    flags = list(sol.flags)
    if res.status == "unbounded":
        cap = delta_cap if delta_cap is not None else _default_delta_cap(net, sol, split)
        G2 = np.vstack([G] + died_rows)
        h2 = np.concatenate([h, np.full(len(died_rows), cap)])
        prog = ConvexProgram(q2=np.zeros(nv), q1=q1, eq_mat=E, eq_rhs=f,
                             ineq_mat=G2, ineq_rhs=h2, lb=lb, ub=ub)
        res = solve(prog, tol=tol, max_iter=200)
        flags.append("stage2_delta_boxed")
        log.warning("stage 2 unbounded; re-solved with gap cap %.3g", cap)
    if not res.optimal:
        raise SolverError(f"stage 2 solve failed: {res.status}")
    refined = CostSolution(
        c_star=res.x[:blocks.n_c],
        p_star=res.x[blocks.n_c:nv],
        eps_star=dict(sol.eps_star),
        normalization=sol.normalization,
        objective=sol.objective,
        flags=tuple(flags),
    )
    refined.validate(net)
    return refined


def _default_delta_cap(net, sol: CostSolution, split: CohortSplit) -> float:
    worst = 0.0
    for walk in split.survived + split.died:
        for sid, flows in walk.per_subnet_flows.items():
            cost = sum(sol.c_star[a] * k for a, k in flows.items())
            worst = max(worst, abs(cost))
    return 10.0 * max(worst, 1.0)


# ---------------------------------------------------------------------------
# Artifact IO


def write_solution(sol: CostSolution, net: HierNetwork, path) -> None:
    lines = [f"# format: {FORMAT_COSTS} v1"]
    j, sigma = sol.normalization
    lines.append(f"meta normalization_arc={j} sign={sigma} "
                 f"objective={sol.objective:.17g} "
                 f"flags={','.join(sol.flags) or '-'} "
                 f"network={net.fingerprint()}")
    lines.append("[costs]")
    for a, v in enumerate(sol.c_star):
        lines.append(f"{a}\t{v:.17g}")
    lines.append("[potentials]")
    for r, v in enumerate(sol.p_star):
        lines.append(f"{r}\t{v:.17g}")
    lines.append("[gaps]")
    for (l, t, q), v in sorted(sol.eps_star.items()):
        lines.append(f"{l}\t{t}\t{q}\t{v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_solution(path, net: HierNetwork | None = None) -> CostSolution:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# format:"):
        raise InputError(f"{path}: missing format header")
    header = text[0].split(":", 1)[1].strip().split()
    if header[0] != FORMAT_COSTS or not header[1].startswith("v1"):
        raise InputError(f"{path}: unsupported format {text[0]!r}")
    meta: dict = {}
    costs: dict = {}
    pots: dict = {}
    gaps: dict = {}
    section = None
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
        if section == "costs":
            costs[int(f[0])] = float(f[1])
        elif section == "potentials":
            pots[int(f[0])] = float(f[1])
        elif section == "gaps":
            gaps[(int(f[0]), int(f[1]), int(f[2]))] = float(f[3])
    if net is not None and meta.get("network") not in (None, net.fingerprint()):
        raise InputError(f"{path}: cost solution was fitted on a different network")
    c = np.array([costs[i] for i in range(len(costs))])
    p = np.array([pots[i] for i in range(len(pots))])
    flags = tuple(x for x in meta.get("flags", "-").split(",") if x and x != "-")
    return CostSolution(c, p, gaps, (int(meta["normalization_arc"]),
                                     int(meta["sign"])),
                        float(meta["objective"]), flags)
