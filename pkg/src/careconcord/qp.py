"""Dense convex quadratic/linear programming via a primal-dual interior point
method with Mehrotra predictor-corrector steps.

Problems have the form

    minimize    x' diag(q2) x + q1' x
    subject to  E x = f
                G x <= h
                lb <= x <= ub

with q2 >= 0 (all-zero gives an LP).  The solver is dense and deterministic:
the same program always produces the same iterates.  Variable bounds are
handled natively so they only contribute diagonal terms to the Newton system.

Infeasibility and unboundedness are detected from diverging iterates and then
certified: a Farkas certificate for infeasibility, an improving ray for
unboundedness.  If certification fails the solver reports ``max_iter`` with
the best iterate instead of guessing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import InputError

REG = 1e-10          # diagonal regularization of the Newton system
DIVERGE = 1e9


@dataclass
class ConvexProgram:
    q2: np.ndarray                 # diagonal quadratic coefficients, >= 0
    q1: np.ndarray
    eq_mat: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    ineq_mat: np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.q2 = np.asarray(self.q2, dtype=float)
        self.q1 = np.asarray(self.q1, dtype=float)
        n = self.q1.size
        if self.q2.shape != (n,):
            raise InputError("q2 and q1 dimensions differ")
        if np.any(self.q2 < 0):
            raise InputError("q2 must be nonnegative for convexity")
        if self.eq_mat is None:
            self.eq_mat = np.zeros((0, n))
            self.eq_rhs = np.zeros(0)
        else:
            self.eq_mat = np.asarray(self.eq_mat, dtype=float)
            self.eq_rhs = np.asarray(self.eq_rhs, dtype=float)
        if self.ineq_mat is None:
            self.ineq_mat = np.zeros((0, n))
            self.ineq_rhs = np.zeros(0)
        else:
            self.ineq_mat = np.asarray(self.ineq_mat, dtype=float)
            self.ineq_rhs = np.asarray(self.ineq_rhs, dtype=float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if (self.eq_mat.shape[1] != n or self.ineq_mat.shape[1] != n
                or self.lb.shape != (n,) or self.ub.shape != (n,)):
            raise InputError("inconsistent program dimensions")

    @property
    def n(self) -> int:
        return self.q1.size

    def objective(self, x: np.ndarray) -> float:
        return float(self.q2 @ (x * x) + self.q1 @ x)

    def dump(self, path) -> None:
        """Plain-text matrix dump for external cross-checking."""
        lines = ["# format: careconcord/program v1", f"n {self.n}"]
        for name, arr in [("q2", self.q2), ("q1", self.q1), ("f", self.eq_rhs),
                          ("h", self.ineq_rhs), ("lb", self.lb), ("ub", self.ub)]:
            lines.append(f"{name} " + " ".join(f"{v:.17g}" for v in arr))
        for name, mat in [("E", self.eq_mat), ("G", self.ineq_mat)]:
            lines.append(f"{name} {mat.shape[0]}")
            for row in mat:
                lines.append(" ".join(f"{v:.17g}" for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class SolveResult:
    x: np.ndarray
    status: str                     # optimal | infeasible | unbounded | max_iter
    objective: float
    eq_mult: np.ndarray
    ineq_mult: np.ndarray
    lb_mult: np.ndarray
    ub_mult: np.ndarray
    kkt_residuals: dict
    iterations: int
    certificate: np.ndarray | None = None
    messages: list = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def solve(prog: ConvexProgram, tol: float = 1e-8, max_iter: int = 100,
          _certify: bool = True) -> SolveResult:
    n = prog.n
    E, f = prog.eq_mat, prog.eq_rhs
    G, h = prog.ineq_mat, prog.ineq_rhs
    me, mg = E.shape[0], G.shape[0]
    has_lb = np.isfinite(prog.lb)
    has_ub = np.isfinite(prog.ub)
    il, iu = np.where(has_lb)[0], np.where(has_ub)[0]
    nl, nu = il.size, iu.size
    two_q = 2.0 * prog.q2

    # strict-interior start
    x = np.zeros(n)
    x[il] = np.maximum(x[il], prog.lb[il] + 1.0)
    x[iu] = np.minimum(x[iu], prog.ub[iu] - 1.0)
    both = has_lb & has_ub
    x[both] = 0.5 * (prog.lb[both] + prog.ub[both])
    s = np.maximum(1.0, np.abs(h - G @ x)) if mg else np.zeros(0)
    z = np.ones(mg)
    sl = np.maximum(x[il] - prog.lb[il], 1.0)
    zl = np.ones(nl)
    su = np.maximum(prog.ub[iu] - x[iu], 1.0)
    zu = np.ones(nu)
    y = np.zeros(me)

    n_comp = mg + nl + nu
    best = None

    def residuals():
        rd = two_q * x + prog.q1 + E.T @ y + G.T @ z
        rd[il] -= zl
        rd[iu] += zu
        rpe = E @ x - f
        rpg = G @ x + s - h if mg else np.zeros(0)
        rbl = x[il] - prog.lb[il] - sl
        rbu = prog.ub[iu] - x[iu] - su
        comp = 0.0
        if n_comp:
            parts = [s * z, sl * zl, su * zu]
            comp = max(float(np.max(np.abs(p))) if p.size else 0.0 for p in parts)
        pri = max(
            float(np.max(np.abs(rpe))) if me else 0.0,
            float(np.max(np.abs(rpg))) if mg else 0.0,
            float(np.max(np.abs(rbl))) if nl else 0.0,
            float(np.max(np.abs(rbu))) if nu else 0.0,
        )
        return rd, rpe, rpg, rbl, rbu, pri, comp

    def result(status, it, cert=None, msgs=()):
        rd, rpe, rpg, rbl, rbu, pri, comp = residuals()
        res = {
            "primal": pri,
            "dual": float(np.max(np.abs(rd))) if n else 0.0,
            "complementarity": comp,
        }
        return SolveResult(
            x=x.copy(), status=status, objective=prog.objective(x),
            eq_mult=y.copy(), ineq_mult=z.copy(), lb_mult=zl.copy(),
            ub_mult=zu.copy(), kkt_residuals=res, iterations=it,
            certificate=cert, messages=list(msgs),
        )

    stall = 0
    for it in range(1, max_iter + 1):
        rd, rpe, rpg, rbl, rbu, pri, comp = residuals()
        dual = float(np.max(np.abs(rd))) if n else 0.0
        mu = 0.0
        if n_comp:
            mu = (float(s @ z) + float(sl @ zl) + float(su @ zu)) / n_comp
        if pri <= tol and dual <= tol and comp <= tol:
            return result("optimal", it - 1)

        gap_proxy = max(pri, dual, comp)
        if best is None or gap_proxy < 0.9 * best[0]:
            best = (gap_proxy, x.copy(), y.copy(), z.copy(), zl.copy(), zu.copy())
            stall = 0
        else:
            stall += 1
        if stall >= 20 and _certify:
            break  # no progress; hand over to the certificate phase

        # divergence checks before factoring
        if np.max(np.abs(x)) > DIVERGE and mu < 1e-4:
            cert = _unbounded_ray(prog, x)
            if cert is not None:
                return result("unbounded", it - 1, cert,
                              ["improving ray certified"])
        dual_norm = max(
            float(np.max(np.abs(y))) if me else 0.0,
            float(np.max(np.abs(z))) if mg else 0.0,
            float(np.max(np.abs(zl))) if nl else 0.0,
            float(np.max(np.abs(zu))) if nu else 0.0,
        )
        if dual_norm > DIVERGE:
            cert = _farkas(prog, y, z, zl, zu, il, iu)
            if cert is not None:
                return result("infeasible", it - 1, cert,
                              ["Farkas certificate verified"])

        # Newton system: eliminate inequality and bound blocks
        w = z / s if mg else np.zeros(0)
        H = np.zeros((n, n))
        if mg:
            H += (G * w[:, None]).T @ G
        diag = two_q + REG
        Hd = H.ravel()[:: n + 1]
        Hd += diag
        if nl:
            Hd[il] += zl / sl
        if nu:
            Hd[iu] += zu / su
        K = np.zeros((n + me, n + me))
        K[:n, :n] = H
        if me:
            K[:n, n:] = E.T
            K[n:, :n] = E
            K[n:, n:] = -REG * np.eye(me)
        try:
            lu = sla.lu_factor(K)
        except Exception:
            return result("max_iter", it - 1,
                          msgs=["Newton system factorization failed"])

        def newton(rc_g, rc_l, rc_u):
            r1 = -rd.copy()
            if mg:
                r1 -= G.T @ ((-rc_g + z * rpg) / s)
            if nl:
                r1[il] += (-rc_l + zl * rbl) / sl
            if nu:
                r1[iu] -= (-rc_u + zu * rbu) / su
            rhs = np.concatenate([r1, -rpe])
            sol_vec = sla.lu_solve(lu, rhs)
            corr = rhs - K @ sol_vec
            sol_vec += sla.lu_solve(lu, corr)  # one refinement round
            dx = sol_vec[:n]
            dy = sol_vec[n:]
            ds = -rpg - G @ dx if mg else np.zeros(0)
            dz = (-rc_g - z * ds) / s if mg else np.zeros(0)
            dsl = dx[il] - rbl
            dzl = (-rc_l - zl * dsl) / sl if nl else np.zeros(0)
            dsu = -dx[iu] - rbu
            dzu = (-rc_u - zu * dsu) / su if nu else np.zeros(0)
            return dx, dy, ds, dz, dsl, dzl, dsu, dzu

        # predictor
        dx, dy, ds, dz, dsl, dzl, dsu, dzu = newton(s * z, sl * zl, su * zu)
        a_p = _step_len([(s, ds), (sl, dsl), (su, dsu)])
        a_d = _step_len([(z, dz), (zl, dzl), (zu, dzu)])
        if n_comp:
            mu_aff = (
                float((s + a_p * ds) @ (z + a_d * dz))
                + float((sl + a_p * dsl) @ (zl + a_d * dzl))
                + float((su + a_p * dsu) @ (zu + a_d * dzu))
            ) / n_comp
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            sigma = min(1.0, max(0.0, sigma))
            # corrector
            dx, dy, ds, dz, dsl, dzl, dsu, dzu = newton(
                s * z + ds * dz - sigma * mu,
                sl * zl + dsl * dzl - sigma * mu,
                su * zu + dsu * dzu - sigma * mu,
            )
            a_p = _step_len([(s, ds), (sl, dsl), (su, dsu)])
            a_d = _step_len([(z, dz), (zl, dzl), (zu, dzu)])
        eta = 0.99995 if mu < 1e-6 else 0.9995
        a_p = min(1.0, eta * a_p)
        a_d = min(1.0, eta * a_d)

        x += a_p * dx
        s += a_p * ds
        sl += a_p * dsl
        su += a_p * dsu
        y += a_d * dy
        z += a_d * dz
        zl += a_d * dzl
        zu += a_d * dzu

    if best is not None:
        _gap, x, y, z, zl, zu = best
        sl = np.maximum(x[il] - prog.lb[il], 1e-300)
        su = np.maximum(prog.ub[iu] - x[iu], 1e-300)
        s = np.maximum(h - G @ x, 1e-300) if mg else np.zeros(0)
    if _certify:
        cert = _search_farkas(prog)
        if cert is not None:
            return result("infeasible", max_iter, cert,
                          ["Farkas certificate found by auxiliary solve"])
        ray = _search_ray(prog)
        if ray is not None:
            return result("unbounded", max_iter, ray,
                          ["improving ray found by auxiliary solve"])
    return result("max_iter", max_iter,
                  msgs=[f"no convergence in {max_iter} iterations"])


def _step_len(pairs) -> float:
    alpha = 1.0
    for v, dv in pairs:
        if v.size == 0:
            continue
        neg = dv < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-v[neg] / dv[neg])))
    return alpha


def _unbounded_ray(prog: ConvexProgram, x: np.ndarray) -> np.ndarray | None:
    """Certify unboundedness: a direction d with Ed=0, Gd<=0, bound-compatible,
    Qd=0 and q1'd < 0."""
    d = x / np.max(np.abs(x))
    ok = (
        (prog.eq_mat.shape[0] == 0 or np.max(np.abs(prog.eq_mat @ d)) < 1e-6)
        and (prog.ineq_mat.shape[0] == 0 or np.max(prog.ineq_mat @ d) < 1e-6)
        and np.all(d[np.isfinite(prog.lb)] > -1e-6)
        and np.all(d[np.isfinite(prog.ub)] < 1e-6)
        and np.max(np.abs(prog.q2 * d)) < 1e-6
        and prog.q1 @ d < -1e-8
    )
    return d if ok else None


_CERT_BOX = 1e4


def _search_farkas(prog: ConvexProgram) -> np.ndarray | None:
    """Look for a Farkas certificate of primal infeasibility.

    Seeks (y, z, zl, zu) with z, zl, zu >= 0 such that
    E'y + G'z - zl + zu = 0 and f'y + h'z - lb'zl + ub'zu = -1.
    """
    n = prog.n
    il = np.where(np.isfinite(prog.lb))[0]
    iu = np.where(np.isfinite(prog.ub))[0]
    me, mg = prog.eq_mat.shape[0], prog.ineq_mat.shape[0]
    nv = me + mg + il.size + iu.size
    if nv == 0:
        return None
    # columns: y | z | zl | zu
    top = np.hstack([
        prog.eq_mat.T,
        prog.ineq_mat.T,
        -np.eye(n)[:, il],
        np.eye(n)[:, iu],
    ])
    row = np.concatenate([
        prog.eq_rhs, prog.ineq_rhs, -prog.lb[il], prog.ub[iu],
    ])
    aux = ConvexProgram(
        q2=np.zeros(nv), q1=np.zeros(nv),
        eq_mat=np.vstack([top, row]), eq_rhs=np.concatenate([np.zeros(n), [-1.0]]),
        lb=np.concatenate([np.full(me, -_CERT_BOX), np.zeros(nv - me)]),
        ub=np.full(nv, _CERT_BOX),
    )
    res = solve(aux, tol=1e-9, max_iter=100, _certify=False)
    if not res.optimal:
        return None
    v = res.x
    resid = float(np.max(np.abs(top @ v))) if n else 0.0
    if resid < 1e-6 and abs(row @ v + 1.0) < 1e-6:
        return v
    return None


def _search_ray(prog: ConvexProgram) -> np.ndarray | None:
    """Look for an improving ray certifying unboundedness: Ed=0, Gd<=0,
    bound-compatible signs, diag(q2) d = 0, q1'd = -1."""
    n = prog.n
    q_rows = np.where(prog.q2 > 0)[0]
    eq = [prog.eq_mat, prog.q1.reshape(1, -1)]
    rhs = [prog.eq_rhs, np.array([-1.0])]
    if q_rows.size:
        eq.append(np.eye(n)[q_rows])
        rhs.append(np.zeros(q_rows.size))
    lb = np.full(n, -_CERT_BOX)
    ub = np.full(n, _CERT_BOX)
    lb[np.isfinite(prog.lb)] = 0.0
    ub[np.isfinite(prog.ub)] = 0.0
    aux = ConvexProgram(
        q2=np.zeros(n), q1=np.zeros(n),
        eq_mat=np.vstack(eq), eq_rhs=np.concatenate(rhs),
        ineq_mat=prog.ineq_mat if prog.ineq_mat.shape[0] else None,
        ineq_rhs=np.zeros(prog.ineq_mat.shape[0]) if prog.ineq_mat.shape[0] else None,
        lb=lb, ub=ub,
    )
    res = solve(aux, tol=1e-9, max_iter=100, _certify=False)
    if not res.optimal:
        return None
    d = res.x
    ok = (
        (prog.eq_mat.shape[0] == 0 or np.max(np.abs(prog.eq_mat @ d)) < 1e-6)
        and (prog.ineq_mat.shape[0] == 0 or np.max(prog.ineq_mat @ d) < 1e-6)
        and prog.q1 @ d < -0.5
    )
    return d if ok else None


def _farkas(prog, y, z, zl, zu, il, iu) -> np.ndarray | None:
    """Certify primal infeasibility from diverging duals."""
    scale = max(
        np.max(np.abs(y)) if y.size else 0.0,
        np.max(np.abs(z)) if z.size else 0.0,
        np.max(np.abs(zl)) if zl.size else 0.0,
        np.max(np.abs(zu)) if zu.size else 0.0,
    )
    if scale <= 0:
        return None
    yn, zn, zln, zun = y / scale, z / scale, zl / scale, zu / scale
    n = prog.n
    lhs = prog.eq_mat.T @ yn + prog.ineq_mat.T @ zn
    lhs_full = lhs.copy()
    lhs_full[il] -= zln
    lhs_full[iu] += zun
    rhs = (
        (prog.eq_rhs @ yn if yn.size else 0.0)
        + (prog.ineq_rhs @ zn if zn.size else 0.0)
        - (prog.lb[il] @ zln if zln.size else 0.0)
        + (prog.ub[iu] @ zun if zun.size else 0.0)
    )
    if np.max(np.abs(lhs_full)) < 1e-6 and rhs < -1e-8 and np.all(zn > -1e-9):
        return np.concatenate([yn, zn, zln, zun])
    return None
