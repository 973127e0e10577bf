"""Branch-and-bound solver for convex mixed-integer quadratic programs.

Binary variables are branched on top of convex QP relaxations solved by
:mod:`switchmpc.qp`.  The search is best-bound-first with depth-first dives
for early incumbents; within a node, fixed variables are eliminated by
substitution and cheap propagation (singleton equalities, one-hot groups,
bound activity) shrinks the relaxation and catches most infeasible nodes
before any factorization.  When the equality rows contain one-hot groups
(sum of binaries equal to one), branching fixes a whole group per child
instead of a single variable.  Everything is deterministic: ties break on
the lowest variable index and nodes are ordered by (bound, insertion order).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .qp import QpResult, solve_qp

_INF = float("inf")


@dataclass
class MiqpProblem:
    """``min 0.5 x'Px + q'x`` s.t. ``A x = b``, ``G x <= h``, ``lb <= x <= ub``.

    ``bool_idx`` lists the entries of x restricted to {0, 1}.
    """

    p: sp.spmatrix
    q: np.ndarray
    a_eq: sp.spmatrix | None = None
    b_eq: np.ndarray | None = None
    g: sp.spmatrix | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    bool_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.n_var
        self.p = sp.csc_matrix(self.p) if self.p is not None else sp.csc_matrix((n, n))
        if self.p.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.p.shape}")
        if self.a_eq is not None:
            self.a_eq = sp.csr_matrix(self.a_eq)
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            if self.a_eq.shape[1] != n or self.b_eq.size != self.a_eq.shape[0]:
                raise ValueError("equality block shapes are inconsistent")
        if self.g is not None:
            self.g = sp.csr_matrix(self.g)
            self.h = np.asarray(self.h, dtype=float).ravel()
            if self.g.shape[1] != n or self.h.size != self.g.shape[0]:
                raise ValueError("inequality block shapes are inconsistent")
        self.lb = np.full(n, -_INF) if self.lb is None \
            else np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.full(n, _INF) if self.ub is None \
            else np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if np.any(self.lb > self.ub):
            raise ValueError("lb must not exceed ub")
        self.bool_idx = np.unique(np.asarray(self.bool_idx, dtype=np.int64))
        if self.bool_idx.size:
            if self.bool_idx[0] < 0 or self.bool_idx[-1] >= n:
                raise ValueError("bool_idx out of range")
            if np.any(self.lb[self.bool_idx] < -1e-12) or np.any(self.ub[self.bool_idx] > 1 + 1e-12):
                raise ValueError("binary variables must have bounds within [0, 1]")

    @property
    def n_var(self) -> int:
        return self.q.size

    def validate(self, tol: float = 1e-8) -> None:
        """Check that P is symmetric positive semidefinite (with tolerance).

        Diagonal P is checked directly; moderate sizes use an eigenvalue
        bound; very large non-diagonal P falls back to randomized quadratic
        probes (a necessary condition, documented heuristic).
        """
        n = self.n_var
        scale = abs(self.p).max() if self.p.nnz else 0.0
        sym_gap = abs(self.p - self.p.T).max() if self.p.nnz else 0.0
        if sym_gap > tol * (1.0 + scale):
            raise ValueError(f"P is not symmetric (gap {sym_gap:.3e})")
        off_diag = self.p - sp.diags(self.p.diagonal())
        if off_diag.nnz == 0:
            if np.any(self.p.diagonal() < -tol * (1.0 + scale)):
                raise ValueError("P has a negative diagonal entry")
            return
        if n <= 1500:
            w = np.linalg.eigvalsh(self.p.toarray())
            if w[0] < -tol * (1.0 + scale):
                raise ValueError(f"P is not positive semidefinite (lambda_min {w[0]:.3e})")
            return
        rng = np.random.default_rng(0)
        for _ in range(8):
            v = rng.standard_normal(n)
            if float(v @ (self.p @ v)) < -tol * (1.0 + scale) * float(v @ v):
                raise ValueError("P failed a positive-semidefiniteness probe")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.p @ x) + self.q @ x)


@dataclass
class MiqpSolution:
    """``status`` is Optimal | GapReached | Infeasible | IterationLimit."""

    status: str
    x: np.ndarray | None
    objective: float | None
    best_bound: float | None
    gap: float | None
    nodes: int
    qp_solves: int

    @property
    def ok(self) -> bool:
        return self.status in ("Optimal", "GapReached")


def one_hot_groups(problem: MiqpProblem) -> list[np.ndarray]:
    """Equality rows of the form (sum of >= 2 binaries) == 1."""
    if problem.a_eq is None or problem.bool_idx.size == 0:
        return []
    bool_set = set(int(i) for i in problem.bool_idx)
    groups = []
    a = problem.a_eq
    for r in range(a.shape[0]):
        if problem.b_eq[r] != 1.0:
            continue
        sl = slice(a.indptr[r], a.indptr[r + 1])
        cols = a.indices[sl]
        vals = a.data[sl]
        if cols.size >= 2 and np.all(vals == 1.0) and all(int(c) in bool_set for c in cols):
            groups.append(np.sort(cols.astype(np.int64)))
    return groups


def warm_start(problem: MiqpProblem, candidate: np.ndarray,
               tol: float = 1e-7) -> tuple[np.ndarray, float] | None:
    """Validate a candidate point as an initial incumbent.

    Returns ``(x, objective)`` when the candidate satisfies bounds,
    equalities, inequalities, and binary integrality within ``tol``-scaled
    slack; returns None otherwise (the hint is then simply unused — a bad
    hint never affects correctness).
    """
    x = np.asarray(candidate, dtype=float).ravel()
    if x.size != problem.n_var or not np.all(np.isfinite(x)):
        return None
    scale = 1.0 + float(np.max(np.abs(x)))
    if np.any(x < problem.lb - tol * scale) or np.any(x > problem.ub + tol * scale):
        return None
    if problem.bool_idx.size:
        frac = np.abs(x[problem.bool_idx] - np.round(x[problem.bool_idx]))
        if np.max(frac, initial=0.0) > 1e-6:
            return None
        x = x.copy()
        x[problem.bool_idx] = np.round(x[problem.bool_idx])
    if problem.a_eq is not None and problem.a_eq.shape[0]:
        res = problem.a_eq @ x - problem.b_eq
        if np.max(np.abs(res), initial=0.0) > tol * (1.0 + np.max(np.abs(problem.b_eq))):
            return None
    if problem.g is not None and problem.g.shape[0]:
        res = problem.g @ x - problem.h
        if np.max(res, initial=0.0) > tol * (1.0 + np.max(np.abs(problem.h))):
            return None
    return x, problem.objective(x)


def _propagate(problem: MiqpProblem, groups: list[np.ndarray],
               fixed: dict[int, float], tol: float = 1e-9) -> dict[int, float] | None:
    """Close ``fixed`` under cheap implications; None signals infeasibility."""
    fixed = dict(fixed)
    a = problem.a_eq
    g = problem.g
    changed = True
    while changed:
        changed = False
        for grp in groups:
            vals = [fixed.get(int(c)) for c in grp]
            ones = sum(1 for v in vals if v is not None and v > 0.5)
            free = [int(c) for c, v in zip(grp, vals) if v is None]
            if ones > 1:
                return None
            if ones == 1:
                for c in free:
                    fixed[c] = 0.0
                    changed = True
            elif not free:
                return None
            elif len(free) == 1 and ones == 0:
                fixed[free[0]] = 1.0
                changed = True
        if a is not None:
            for r in range(a.shape[0]):
                sl = slice(a.indptr[r], a.indptr[r + 1])
                cols = a.indices[sl]
                vals = a.data[sl]
                rhs = problem.b_eq[r]
                free_cols, free_vals = [], []
                for c, v in zip(cols, vals):
                    fv = fixed.get(int(c))
                    if fv is None:
                        free_cols.append(int(c))
                        free_vals.append(v)
                    else:
                        rhs -= v * fv
                rscale = 1.0 + abs(problem.b_eq[r])
                if not free_cols:
                    if abs(rhs) > 1e-7 * rscale:
                        return None
                elif len(free_cols) == 1:
                    val = rhs / free_vals[0]
                    c = free_cols[0]
                    if c in set(int(i) for i in problem.bool_idx):
                        if abs(val - round(val)) > 1e-6:
                            return None
                        val = float(round(val))
                    if val < problem.lb[c] - 1e-7 * rscale or val > problem.ub[c] + 1e-7 * rscale:
                        return None
                    fixed[c] = val
                    changed = True
        if g is not None:
            for r in range(g.shape[0]):
                sl = slice(g.indptr[r], g.indptr[r + 1])
                cols = g.indices[sl]
                vals = g.data[sl]
                rhs = problem.h[r]
                free_cols, free_vals = [], []
                for c, v in zip(cols, vals):
                    fv = fixed.get(int(c))
                    if fv is None:
                        free_cols.append(int(c))
                        free_vals.append(v)
                    else:
                        rhs -= v * fv
                if not free_cols:
                    if rhs < -1e-7 * (1.0 + abs(problem.h[r])):
                        return None
                    continue
                min_act = 0.0
                finite = True
                for c, v in zip(free_cols, free_vals):
                    bnd = problem.lb[c] if v > 0 else problem.ub[c]
                    if not np.isfinite(bnd):
                        finite = False
                        break
                    min_act += v * bnd
                if not finite:
                    continue
                slack = rhs - min_act
                rscale = 1.0 + abs(problem.h[r])
                if slack < -1e-7 * rscale:
                    return None
                if slack <= 1e-9 * rscale:
                    # the row pins every free variable at its activity bound
                    for c, v in zip(free_cols, free_vals):
                        fixed[c] = float(problem.lb[c] if v > 0 else problem.ub[c])
                    changed = True
    return fixed


def _reduced_solve(problem: MiqpProblem, fixed: dict[int, float],
                   qp_tol: float) -> tuple[QpResult | None, np.ndarray, np.ndarray]:
    """Substitute fixed variables and solve the QP relaxation on the rest."""
    n = problem.n_var
    mask = np.ones(n, dtype=bool)
    xfix = np.zeros(n)
    for c, v in fixed.items():
        mask[c] = False
        xfix[c] = v
    free = np.flatnonzero(mask)
    if free.size == 0:
        # everything pinned: feasibility was verified by propagation rows,
        # but bounds and any residual rows still need a direct check
        ok = np.all(xfix >= problem.lb - 1e-9) and np.all(xfix <= problem.ub + 1e-9)
        if problem.a_eq is not None and ok:
            ok = np.max(np.abs(problem.a_eq @ xfix - problem.b_eq), initial=0.0) <= 1e-7
        if problem.g is not None and ok:
            ok = np.max(problem.g @ xfix - problem.h, initial=0.0) <= 1e-7
        res = QpResult("optimal", np.zeros(0), 0.0) if ok else QpResult("infeasible", None, None)
        return res, free, xfix
    p_sub = problem.p[free][:, free]
    cross = problem.p[free][:, ~mask] @ xfix[~mask] if (~mask).any() else 0.0
    q_sub = problem.q[free] + cross
    a_sub = b_sub = None
    if problem.a_eq is not None and problem.a_eq.shape[0]:
        a_all = problem.a_eq.tocsc()
        a_sub = a_all[:, free].tocsr()
        b_sub = problem.b_eq - (a_all[:, ~mask] @ xfix[~mask] if (~mask).any() else 0.0)
        nz = np.diff(a_sub.indptr) > 0
        if np.any(~nz):
            if np.max(np.abs(b_sub[~nz]), initial=0.0) > 1e-7 * (1.0 + np.max(np.abs(problem.b_eq))):
                return QpResult("infeasible", None, None), free, xfix
            a_sub, b_sub = a_sub[nz], b_sub[nz]
        if a_sub.shape[0] == 0:
            a_sub = b_sub = None
    g_sub = h_sub = None
    if problem.g is not None and problem.g.shape[0]:
        g_all = problem.g.tocsc()
        g_sub = g_all[:, free].tocsr()
        h_sub = problem.h - (g_all[:, ~mask] @ xfix[~mask] if (~mask).any() else 0.0)
        nz = np.diff(g_sub.indptr) > 0
        if np.any(~nz):
            if np.min(h_sub[~nz], initial=0.0) < -1e-7 * (1.0 + np.max(np.abs(problem.h))):
                return QpResult("infeasible", None, None), free, xfix
            g_sub, h_sub = g_sub[nz], h_sub[nz]
        if g_sub.shape[0] == 0:
            g_sub = h_sub = None
    res = solve_qp(p_sub, q_sub, a_sub, b_sub, g_sub, h_sub,
                   lb=problem.lb[free], ub=problem.ub[free], tol=qp_tol)
    return res, free, xfix


def solve_miqp(problem: MiqpProblem, *, gap: float = 1e-6, node_limit: int = 200_000,
               incumbent: np.ndarray | None = None, int_tol: float = 1e-6,
               qp_tol: float = 1e-8) -> MiqpSolution:
    """Solve a convex MIQP to the requested relative gap.

    ``incumbent`` seeds the upper bound with a known feasible point (e.g. a
    shifted previous solution); it is validated first and never changes the
    optimum, only the pruning.
    """
    groups = one_hot_groups(problem)
    group_of: dict[int, np.ndarray] = {}
    for grp in groups:
        for c in grp:
            group_of.setdefault(int(c), grp)

    inc_x: np.ndarray | None = None
    inc_val = _INF
    if incumbent is not None:
        hint = warm_start(problem, incumbent)
        if hint is not None:
            inc_x, inc_val = hint

    nodes = 0
    qp_solves = 0
    lb_open = _INF
    counter = 0
    heap: list[tuple[float, int, dict[int, float]]] = [(-_INF, counter, {})]

    def gap_abs() -> float:
        return gap * max(1.0, abs(inc_val)) if inc_val < _INF else _INF

    def node_value(xfix: np.ndarray, free: np.ndarray,
                   x_free: np.ndarray) -> tuple[float, np.ndarray]:
        full = xfix.copy()
        full[free] = x_free
        return problem.objective(full), full

    while heap:
        bound0, cnt0, fixed0 = heapq.heappop(heap)
        if inc_val < _INF and bound0 >= inc_val - gap_abs():
            if bound0 < inc_val:
                lb_open = min(lb_open, bound0)
            continue
        fixed_b = fixed0
        parent_bound = bound0
        while True:
            if nodes >= node_limit:
                lo = min([parent_bound] + [t[0] for t in heap] + ([lb_open] if lb_open < _INF else []))
                best_bound = max(lo, -_INF)
                g_rep = None if inc_val == _INF else \
                    (inc_val - min(best_bound, inc_val)) / max(1.0, abs(inc_val))
                return MiqpSolution("IterationLimit", inc_x,
                                    None if inc_x is None else inc_val,
                                    None if best_bound == -_INF else best_bound,
                                    g_rep, nodes, qp_solves)
            nodes += 1
            fixed = _propagate(problem, groups, fixed_b)
            if fixed is None:
                break
            res, free, xfix = _reduced_solve(problem, fixed, qp_tol)
            qp_solves += 1
            if not res.optimal:
                break
            val, full_x = node_value(xfix, free, res.x) if free.size \
                else (problem.objective(xfix), xfix)
            bound = max(parent_bound, val)
            if inc_val < _INF and bound >= inc_val - gap_abs():
                if bound < inc_val:
                    lb_open = min(lb_open, bound)
                break
            free_set = set(free.tolist())
            free_bools = [int(c) for c in problem.bool_idx if int(c) in free_set]
            frac = {c: abs(full_x[c] - round(full_x[c])) for c in free_bools}
            fractional = [c for c, f in frac.items() if f > int_tol]
            if not fractional:
                cand = full_x.copy()
                if problem.bool_idx.size:
                    cand[problem.bool_idx] = np.round(cand[problem.bool_idx])
                cand_val = problem.objective(cand)
                node_val = min(bound, cand_val)
                if node_val < inc_val - 1e-12:
                    inc_val = node_val
                    inc_x = cand
                break
            # branch: earliest fractional variable
            branch_var = min(fractional)
            grp = group_of.get(branch_var)
            children: list[dict[int, float]] = []
            if grp is not None:
                free_members = [int(c) for c in grp if c not in fixed]
                order = sorted(free_members, key=lambda c: (-full_x[c], c))
                for m in order:
                    child = dict(fixed)
                    child[m] = 1.0
                    children.append(child)
            else:
                first = 1.0 if full_x[branch_var] >= 0.5 else 0.0
                for v in (first, 1.0 - first):
                    child = dict(fixed)
                    child[branch_var] = v
                    children.append(child)
            for child in children[1:]:
                counter += 1
                heapq.heappush(heap, (bound, counter, child))
            fixed_b = children[0]
            parent_bound = bound

    if inc_x is None:
        return MiqpSolution("Infeasible", None, None, None, None, nodes, qp_solves)
    best_bound = min(inc_val, lb_open)
    g_rep = (inc_val - best_bound) / max(1.0, abs(inc_val))
    status = "Optimal" if g_rep <= 1e-12 else "GapReached"
    return MiqpSolution(status, inc_x, inc_val, best_bound, g_rep, nodes, qp_solves)


def enumerate_assignments(problem: MiqpProblem, qp_tol: float = 1e-8
                          ) -> tuple[np.ndarray | None, float | None]:
    """Exhaustive reference: try every binary assignment, keep the best QP.

    Exponential in the number of binaries — intended as an oracle for tests
    and small diagnostics, not a production path.
    """
    nb = problem.bool_idx.size
    best_x, best_val = None, None
    for code in range(1 << nb):
        fixed = {int(problem.bool_idx[i]): float((code >> i) & 1) for i in range(nb)}
        res, free, xfix = _reduced_solve(problem, fixed, qp_tol)
        if not res.optimal:
            continue
        full = xfix.copy()
        if free.size:
            full[free] = res.x
        val = problem.objective(full)
        if best_val is None or val < best_val:
            best_val, best_x = val, full
    return best_x, best_val


def dump_problem(problem: MiqpProblem, path) -> None:
    """Write the problem in a plain-text sparse triplet format.

    Sections: dims, P/Aeq/G as ``i j value`` triplets sorted by (i, j),
    q/beq/h/lb/ub as ``i value`` lines, bools as sorted indices.  The format
    is deterministic so identical problems serialize byte-identically.
    """
    lines = [f"miqp 1 n {problem.n_var}"]

    def mat_section(name, m):
        if m is None:
            lines.append(f"{name} 0 0 0")
            return
        coo = sp.coo_matrix(m)
        order = np.lexsort((coo.col, coo.row))
        lines.append(f"{name} {m.shape[0]} {m.shape[1]} {coo.nnz}")
        for k in order:
            lines.append(f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.17g}")

    def vec_section(name, v):
        if v is None:
            lines.append(f"{name} 0")
            return
        lines.append(f"{name} {v.size}")
        for i, val in enumerate(v):
            lines.append(f"{i} {val:.17g}")

    mat_section("P", problem.p)
    vec_section("q", problem.q)
    mat_section("Aeq", problem.a_eq)
    vec_section("beq", problem.b_eq)
    mat_section("G", problem.g)
    vec_section("h", problem.h)
    vec_section("lb", problem.lb)
    vec_section("ub", problem.ub)
    lines.append(f"bools {problem.bool_idx.size}")
    lines.extend(str(int(i)) for i in problem.bool_idx)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
