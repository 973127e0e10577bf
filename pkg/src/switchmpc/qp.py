"""Convex quadratic programming via a primal-dual interior-point method.

Solves ``min 0.5 x'Px + q'x`` subject to ``Ax = b``, ``Gx <= h`` and box
bounds, with P positive semidefinite.  The implementation is a Mehrotra
predictor-corrector on the reduced KKT system, factored sparsely each
iteration; one step of iterative refinement against the unregularized KKT
matrix keeps the residual contract tight.  The contract is the scaled KKT
residual at the returned point, not the algorithm.

Infeasibility is decided robustly: a Farkas-type certificate is monitored on
the dual iterates, and any unconverged solve falls back to an elastic
relaxation whose optimal slack measures the constraint violation directly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalBreakdownError

_INF = float("inf")
_DEBUG = bool(os.environ.get("SWITCHMPC_QP_DEBUG"))


@dataclass
class QpResult:
    """Solution report: ``status`` is 'optimal' or 'infeasible'."""

    status: str
    x: np.ndarray | None
    objective: float | None
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    iterations: int = 0
    residuals: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _csc(mat, rows, cols) -> sp.csc_matrix:
    if mat is None:
        return sp.csc_matrix((rows, cols))
    if sp.issparse(mat):
        out = mat.tocsc().astype(float)
    else:
        out = sp.csc_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))
    if out.shape != (rows, cols):
        raise ValueError(f"expected shape {(rows, cols)}, got {out.shape}")
    return out


def _fold_bounds(g: sp.csc_matrix, h: np.ndarray, lb, ub, n: int):
    """Append finite box bounds as inequality rows."""
    rows = [g] if g.shape[0] else []
    rhs = [h] if h.size else []
    if ub is not None:
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (n,))
        idx = np.flatnonzero(np.isfinite(ub))
        if idx.size:
            e = sp.csc_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, n))
            rows.append(e)
            rhs.append(ub[idx])
    if lb is not None:
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (n,))
        idx = np.flatnonzero(np.isfinite(lb))
        if idx.size:
            e = sp.csc_matrix((-np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, n))
            rows.append(e)
            rhs.append(-lb[idx])
    if not rows:
        return sp.csc_matrix((0, n)), np.zeros(0)
    return sp.vstack(rows, format="csc"), np.concatenate(rhs)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return _INF
    return float(np.min(-v[neg] / dv[neg]))


def _kkt_residuals(p, q, a, b, g, h, x, y, z, s):
    rd = p @ x + q
    if a.shape[0]:
        rd = rd + a.T @ y
    if g.shape[0]:
        rd = rd + g.T @ z
    rp = (a @ x - b) if a.shape[0] else np.zeros(0)
    rg = (g @ x + s - h) if g.shape[0] else np.zeros(0)
    return rd, rp, rg


def _active_set_solve(p, q, a, b, g, h, act, tol, rounds=12):
    """Primal-dual active-set iteration from an explicit initial guess.

    Solves the equality-constrained KKT system on the guessed active rows;
    a wrong guess shows up as either a violated inactive row or a negative
    multiplier on an active one, and a few rounds of adding the former and
    dropping the latter usually correct it.  Returns ``(x, y, z, s)``
    (exact complementarity by construction) or None when the set cycles or
    fails to settle within ``rounds``.
    """
    n = q.size
    me, mi = a.shape[0], g.shape[0]
    act = act.copy()
    h_scale = 1.0 + float(np.max(np.abs(h), initial=0.0))
    scale = 1.0 + max(abs(p).max() if p.nnz else 0.0,
                      abs(g).max() if g.nnz else 0.0,
                      abs(a).max() if a.nnz else 0.0)
    reg = 1e-11 * scale
    seen = set()
    for _ in range(rounds):
        key = np.packbits(act).tobytes()
        if key in seen:
            if _DEBUG:
                print("qp active-set: guess cycling")
            return None
        seen.add(key)
        idx = np.flatnonzero(act)
        na = idx.size
        if na == 0 and me == 0:
            return None
        g_act = g[idx]
        eq = sp.vstack([a, g_act], format="csc") if me else g_act.tocsc()
        rhs = np.concatenate([-q, b, h[idx]])
        kkt0 = sp.bmat([[p, eq.T], [eq, None]], format="csc")
        kkt = sp.bmat([[p + reg * sp.eye(n), eq.T],
                       [eq, -reg * sp.eye(me + na)]], format="csc")
        try:
            lu = spla.splu(kkt)
        except RuntimeError:
            if _DEBUG:
                print("qp active-set: singular system")
            return None
        # Redundant active rows make kkt0 singular; refinement can then send
        # the multiplier block off along the null space, so keep whichever
        # candidate has the smallest true KKT residual instead of trusting
        # the last refinement step.
        sol = lu.solve(rhs)
        best_sol = sol
        best_res = float(np.max(np.abs(rhs - kkt0 @ sol), initial=0.0))
        for _ in range(2):
            sol = sol + lu.solve(rhs - kkt0 @ sol)
            r = float(np.max(np.abs(rhs - kkt0 @ sol), initial=0.0))
            if not np.isfinite(r):
                break
            if r < best_res:
                best_sol, best_res = sol, r
        sol = best_sol
        if not np.all(np.isfinite(sol)):
            if _DEBUG:
                print("qp active-set: non-finite solution")
            return None
        if best_res > 1e-7 * scale * (1.0 + float(np.max(np.abs(rhs), initial=0.0))):
            # the guessed set leaves the system effectively singular;
            # iterating on a garbage solve only inflates the set further
            if _DEBUG:
                print(f"qp active-set: inaccurate solve res={best_res:.2e}")
            return None
        xp = sol[:n]
        yp = sol[n:n + me]
        za = sol[n + me:]
        z_scale = 1.0 + float(np.max(np.abs(za), initial=0.0))
        sp_new = h - g @ xp
        viol = sp_new < -10.0 * tol * h_scale
        # Negative multipliers below this are clipped at the exit; the bound
        # keeps the injected dual residual well under the caller's tolerance.
        neg = za < -max(0.1 * tol, 1e-13) * z_scale
        if not np.any(viol) and not np.any(neg):
            zp = np.zeros(mi)
            zp[idx] = np.maximum(za, 0.0)
            return xp, yp, zp, np.maximum(sp_new, 0.0)
        act_new = act | viol
        if np.any(neg):
            if np.any(viol):
                # mixed round: conservative single drop of the worst offender
                act_new[idx[np.argmin(za)]] = False
            else:
                # pure dual cleanup: drop every meaningfully negative row at
                # once; anything dropped in error returns as a violation with
                # a positive multiplier next round
                act_new[idx[neg]] = False
        act = act_new
    if _DEBUG:
        print("qp active-set: did not settle")
    return None


def _polish(p, q, a, b, g, h, x, y, z, s, tol):
    """Active-set refinement of a converged interior-point iterate.

    Weakly active inequalities (slack and multiplier both tiny) leave the
    interior-point answer O(sqrt(gap)) off the constraint surface.  The
    active set guessed from the iterate seeds :func:`_active_set_solve`,
    which lands exactly on the constraint surface when the guess (after
    its own corrections) is right.
    """
    act = (z >= s) | (s <= 1e-8 * (1.0 + np.abs(h)))
    return _active_set_solve(p, q, a, b, g, h, act, tol)


def _presolve(a, b, g, h, lb, ub):
    """Forcing-row and fixed-variable reduction; exact, no perturbation.

    Inequality rows whose coefficients are all nonnegative over variables
    bounded below can force every supported variable to its lower bound
    (when the right-hand side equals the row's minimum activity); such rows,
    and any row whose support becomes empty, are removed.  This matters
    beyond speed: an always-active row (zero slack at every feasible point)
    leaves the problem without a strictly interior point, which breaks the
    central path the interior-point iteration follows.

    Returns ``(fixed_mask, values, keep_eq, keep_ineq)`` or the string
    ``'infeasible'`` when a reduction proves the constraints inconsistent.
    """
    n = lb.size
    me, mg = a.shape[0], g.shape[0]
    a_csr, g_csr = a.tocsr(), g.tocsr()
    fixed = np.zeros(n, dtype=bool)
    value = np.zeros(n)
    keep_eq = np.ones(me, dtype=bool)
    keep_ineq = np.ones(mg, dtype=bool)
    lb_w = lb.copy()
    ub_w = ub.copy()

    bind = lb_w >= ub_w - 0.0
    if np.any(lb_w[bind] > ub_w[bind]):
        return "infeasible"
    fixed[bind] = True
    value[bind] = lb_w[bind]

    g_rows = np.repeat(np.arange(mg), np.diff(g_csr.indptr))
    a_rows = np.repeat(np.arange(me), np.diff(a_csr.indptr))
    for _ in range(30):
        changed = False
        live = np.ones(n)
        live[fixed] = 0.0
        vfix = np.where(fixed, value, 0.0)

        if me:
            b_eff = b - a_csr @ vfix
            entry_live = live[a_csr.indices] * (a_csr.data != 0)
            support = np.bincount(a_rows, weights=entry_live, minlength=me)
            empty = keep_eq & (support == 0)
            if np.any(np.abs(b_eff[empty]) > 1e-9 * (1.0 + np.abs(b[empty]))):
                return "infeasible"
            if np.any(empty):
                keep_eq[empty] = False
                changed = True
            single = np.flatnonzero(keep_eq & (support == 1))
            for i in single:
                cols = a_csr.indices[a_csr.indptr[i]: a_csr.indptr[i + 1]]
                coefs = a_csr.data[a_csr.indptr[i]: a_csr.indptr[i + 1]]
                sel = ~fixed[cols] & (coefs != 0)
                j = int(cols[sel][0])
                c = float(coefs[sel][0])
                v = float(b_eff[i]) / c
                if v < lb_w[j] - 1e-9 * (1.0 + abs(v)) or \
                        v > ub_w[j] + 1e-9 * (1.0 + abs(v)):
                    return "infeasible"
                fixed[j] = True
                value[j] = min(max(v, lb_w[j]), ub_w[j])
                keep_eq[i] = False
                changed = True

        if mg and not changed:
            h_eff = h - g_csr @ vfix
            entry_live = live[g_csr.indices] * (g_csr.data != 0)
            support = np.bincount(g_rows, weights=entry_live, minlength=mg)
            hscale = 1.0 + np.abs(h)
            empty = keep_ineq & (support == 0)
            if np.any(h_eff[empty] < -1e-9 * hscale[empty]):
                return "infeasible"
            if np.any(empty):
                keep_ineq[empty] = False
                changed = True

            neg_entry = entry_live * (g_csr.data < 0)
            has_neg = np.bincount(g_rows, weights=neg_entry, minlength=mg) > 0
            lb_bad = np.bincount(g_rows, minlength=mg,
                                 weights=entry_live * (lb_w[g_csr.indices] < 0)) > 0
            lb_safe = np.where(np.isfinite(lb_w) & ~fixed, np.maximum(lb_w, 0.0), 0.0)
            min_act = g_csr @ lb_safe
            cand = keep_ineq & (support > 0) & ~has_neg & ~lb_bad
            if np.any(cand & (h_eff < min_act - 1e-9 * hscale)):
                return "infeasible"
            forcing = np.flatnonzero(cand & (h_eff <= min_act + 1e-9 * hscale))
            for i in forcing:
                cols = g_csr.indices[g_csr.indptr[i]: g_csr.indptr[i + 1]]
                coefs = g_csr.data[g_csr.indptr[i]: g_csr.indptr[i + 1]]
                for j in cols[~fixed[cols] & (coefs != 0)]:
                    fixed[j] = True
                    value[j] = lb_w[j]
                keep_ineq[i] = False
                changed = True
        if not changed:
            break
    return fixed, value, keep_eq, keep_ineq


def solve_qp(p, q, a=None, b=None, g=None, h=None, lb=None, ub=None, *,
             tol: float = 1e-9, max_iter: int = 100,
             _allow_elastic: bool = True) -> QpResult:
    """Solve a convex QP; see module docstring for the problem form.

    Returns a :class:`QpResult` whose scaled KKT residuals are below ``tol``
    on success (``z`` covers the rows of ``g``; bound multipliers are
    internal).  Infeasible problems yield status 'infeasible';
    :class:`~switchmpc.errors.NumericalBreakdownError` is raised only when
    neither a solution nor an infeasibility verdict can be certified.
    """
    q = np.asarray(q, dtype=float).ravel()
    n = q.size
    p_mat = _csc(p, n, n)
    me = 0 if a is None else (a.shape[0] if sp.issparse(a) else np.atleast_2d(a).shape[0])
    a_mat = _csc(a, me, n)
    b_vec = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    if b_vec.size != me:
        raise ValueError(f"b has {b_vec.size} entries for {me} equality rows")
    mg = 0 if g is None else (g.shape[0] if sp.issparse(g) else np.atleast_2d(g).shape[0])
    g_raw = _csc(g, mg, n)
    h_raw = np.zeros(0) if h is None else np.asarray(h, dtype=float).ravel()
    if h_raw.size != mg:
        raise ValueError(f"h has {h_raw.size} entries for {mg} inequality rows")
    lb_w = np.full(n, -_INF) if lb is None else \
        np.broadcast_to(np.asarray(lb, dtype=float), (n,)).copy()
    ub_w = np.full(n, _INF) if ub is None else \
        np.broadcast_to(np.asarray(ub, dtype=float), (n,)).copy()

    pre = _presolve(a_mat, b_vec, g_raw, h_raw, lb_w, ub_w)
    if pre == "infeasible":
        return QpResult("infeasible", None, None)
    fixed, value, keep_eq, keep_ineq = pre

    def full_result(res: QpResult, x_full, y_red, z_red) -> QpResult:
        obj = float(0.5 * x_full @ (p_mat @ x_full) + q @ x_full)
        y_full = np.zeros(me)
        if y_red is not None and y_red.size:
            y_full[keep_eq] = y_red
        z_full = np.zeros(mg)
        if z_red is not None and z_red.size:
            z_full[keep_ineq] = z_red[: int(keep_ineq.sum())]
        return QpResult("optimal", x_full, obj, y=y_full, z=z_full,
                        iterations=res.iterations, residuals=res.residuals)

    if not np.any(fixed) and np.all(keep_eq) and np.all(keep_ineq):
        res = _solve_inner(p_mat, q, a_mat, b_vec, g_raw, h_raw, lb_w, ub_w,
                           tol, max_iter, _allow_elastic)
        if not res.optimal:
            return res
        return full_result(res, res.x, res.y, res.z)

    free = np.flatnonzero(~fixed)
    vfix = np.where(fixed, value, 0.0)
    if free.size == 0:
        x_full = vfix
        bad = (np.max(np.abs(a_mat @ x_full - b_vec), initial=0.0)
               > 1e-7 * (1.0 + np.max(np.abs(b_vec), initial=0.0))) or \
              (np.max(g_raw @ x_full - h_raw, initial=0.0)
               > 1e-7 * (1.0 + np.max(np.abs(h_raw), initial=0.0)))
        if bad:
            return QpResult("infeasible", None, None)
        return full_result(QpResult("optimal", x_full, 0.0), x_full,
                           np.zeros(0), np.zeros(0))

    p_red = p_mat[free][:, free].tocsc()
    q_red = q[free] + np.asarray(p_mat[free][:, fixed] @ value[fixed]).ravel()
    a_red = a_mat[keep_eq][:, free].tocsc()
    b_red = (b_vec - a_mat @ vfix)[keep_eq]
    g_red = g_raw[keep_ineq][:, free].tocsc()
    h_red = (h_raw - g_raw @ vfix)[keep_ineq]
    res = _solve_inner(p_red, q_red, a_red, b_red, g_red, h_red,
                       lb_w[free], ub_w[free], tol, max_iter, _allow_elastic)
    if not res.optimal:
        return res
    x_full = vfix.copy()
    x_full[free] = res.x
    return full_result(res, x_full, res.y, res.z)


def _solve_inner(p_mat, q, a_mat, b_vec, g_raw, h_raw, lb, ub,
                 tol, max_iter, allow_elastic) -> QpResult:
    g_mat, h_vec = _fold_bounds(g_raw, h_raw, lb, ub, q.size)
    mg = g_raw.shape[0]
    if g_mat.shape[0] == 0:
        return _solve_equality_qp(p_mat, q, a_mat, b_vec, tol)
    res = _mehrotra(p_mat, q, a_mat, b_vec, g_mat, h_vec, tol, max_iter)
    if res is None and allow_elastic:
        res = _elastic_verdict(p_mat, q, a_mat, b_vec, g_mat, h_vec, tol, max_iter)
    if res is None:
        raise NumericalBreakdownError("interior-point iteration did not converge",
                                      {"n": q.size, "me": a_mat.shape[0],
                                       "mi": g_mat.shape[0]})
    if res.optimal and res.z is not None:
        res.z = res.z[:mg]
    return res


def _solve_equality_qp(p, q, a, b, tol) -> QpResult:
    n = q.size
    me = a.shape[0]
    scale = 1.0 + (abs(p).max() if p.nnz else 0.0)
    reg = 1e-12 * scale
    if me == 0:
        kkt = (p + reg * sp.eye(n)).tocsc()
        rhs = -q
    else:
        kkt = sp.bmat([[p + reg * sp.eye(n), a.T], [a, -reg * sp.eye(me)]], format="csc")
        rhs = np.concatenate([-q, b])
    try:
        lu = spla.splu(kkt)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise NumericalBreakdownError(f"KKT factorization failed: {exc}") from exc
    x = sol[:n]
    y = sol[n:] if me else np.zeros(0)
    rd, rp, _ = _kkt_residuals(p, q, a, b, sp.csc_matrix((0, n)), np.zeros(0),
                               x, y, np.zeros(0), np.zeros(0))
    sd = 1.0 + float(np.max(np.abs(q), initial=0.0) + np.max(np.abs(p @ x), initial=0.0))
    sp_ = 1.0 + float(np.max(np.abs(b), initial=0.0))
    if np.max(np.abs(rd), initial=0.0) <= 1e3 * tol * sd and \
       np.max(np.abs(rp), initial=0.0) <= 1e3 * tol * sp_:
        obj = float(0.5 * x @ (p @ x) + q @ x)
        return QpResult("optimal", x, obj, y=y, z=np.zeros(0),
                        residuals={"dual": float(np.max(np.abs(rd), initial=0.0)),
                                   "primal": float(np.max(np.abs(rp), initial=0.0))})
    # inconsistent equalities?
    if me:
        lsq = spla.lsqr(a, b, atol=1e-12, btol=1e-12)
        if lsq[3] > 1e-7 * (1.0 + np.linalg.norm(b)):
            return QpResult("infeasible", None, None)
    raise NumericalBreakdownError("equality-constrained KKT solve inaccurate",
                                  {"dual_res": float(np.max(np.abs(rd), initial=0.0))})


def _mehrotra(p, q, a, b, g, h, tol, max_iter) -> QpResult | None:
    """Core predictor-corrector loop; returns None when unconverged."""
    n = q.size
    me, mi = a.shape[0], g.shape[0]
    gt = g.T.tocsc()

    if me:
        x = spla.lsqr(a, b, atol=1e-10, btol=1e-10)[0]
    else:
        x = np.zeros(n)
    s_raw = h - g @ x
    s = np.maximum(s_raw, 1.0)
    z = np.ones(mi)
    y = np.zeros(me)

    scale_mat = 1.0 + max(abs(p).max() if p.nnz else 0.0,
                          abs(a).max() if a.nnz else 0.0,
                          abs(g).max() if g.nnz else 0.0)
    reg = 1e-10 * scale_mat
    mu0 = float(s @ z) / mi
    best_merit = _INF
    best_snap = None
    best_it = 0
    it = 0

    for it in range(1, max_iter + 1):
        rd, rp, rg = _kkt_residuals(p, q, a, b, g, h, x, y, z, s)
        mu = float(s @ z) / mi
        obj = float(0.5 * x @ (p @ x) + q @ x)
        sd = 1.0 + float(max(np.max(np.abs(q), initial=0.0),
                             np.max(np.abs(p @ x), initial=0.0),
                             np.max(np.abs(gt @ z), initial=0.0),
                             np.max(np.abs(a.T @ y), initial=0.0) if me else 0.0))
        sp_ = 1.0 + float(max(np.max(np.abs(b), initial=0.0),
                              np.max(np.abs(h), initial=0.0),
                              np.max(np.abs(g @ x), initial=0.0)))
        nrd = float(np.max(np.abs(rd), initial=0.0))
        nrp = float(np.max(np.abs(rp), initial=0.0))
        nrg = float(np.max(np.abs(rg), initial=0.0))
        gap = float(s @ z)
        if _DEBUG:
            print(f"qp it={it:3d} mu={mu:9.2e} rd={nrd:9.2e}/{tol*sd:8.1e} "
                  f"rp={nrp:9.2e} rg={nrg:9.2e} gap={gap:9.2e}/"
                  f"{tol*(1+abs(obj))*10:8.1e} reg={reg:8.1e}")
        if nrd <= tol * sd and nrp <= tol * sp_ and nrg <= tol * sp_ and \
           gap <= tol * (1.0 + abs(obj)) * 10.0:
            refined = _polish(p, q, a, b, g, h, x, y, z, s, tol)
            if refined is not None:
                xp, yp, zp, sn = refined
                rd2, rp2, rg2 = _kkt_residuals(p, q, a, b, g, h, xp, yp, zp, sn)
                ok = (np.max(np.abs(rd2), initial=0.0) <= tol * sd and
                      np.max(np.abs(rp2), initial=0.0) <= tol * sp_ and
                      np.max(np.abs(rg2), initial=0.0) <= 10.0 * tol * sp_)
                if ok and float(sn @ zp) <= gap + tol:
                    obj2 = float(0.5 * xp @ (p @ xp) + q @ xp)
                    return QpResult("optimal", xp, obj2, y=yp, z=zp, iterations=it,
                                    residuals={"dual": float(np.max(np.abs(rd2), initial=0.0)),
                                               "primal": float(max(np.max(np.abs(rp2), initial=0.0),
                                                                   np.max(np.abs(rg2), initial=0.0))),
                                               "gap": float(sn @ zp)})
            return QpResult("optimal", x, obj, y=y, z=z, iterations=it,
                            residuals={"dual": nrd, "primal": max(nrp, nrg), "gap": gap})
        merit = max(nrd / sd, nrp / sp_, nrg / sp_,
                    gap / (10.0 * (1.0 + abs(obj))))
        if merit < best_merit:
            best_merit = merit
            best_snap = (x.copy(), y.copy(), z.copy(), s.copy())
            best_it = it
        if it - best_it >= 8 and best_merit <= 1e4 * tol:
            # complementarity products have hit machine precision and the
            # dual residual is thrashing without progress; the best iterate
            # is already essentially optimal, so hand it to the polish exit
            break

        # Farkas certificate for primal infeasibility on the scaled duals.
        dual_norm = float(np.max(np.abs(z), initial=0.0) + np.max(np.abs(y), initial=0.0))
        if dual_norm > 1e4:
            ray = (a.T @ y if me else 0.0) + gt @ z
            crit = float(np.max(np.abs(ray), initial=0.0)) / dual_norm
            val = (float(b @ y) if me else 0.0) + float(h @ z)
            if crit <= 1e-9 * scale_mat and val / dual_norm < -1e-9:
                return QpResult("infeasible", None, None, iterations=it)
        if dual_norm > 1e14 or mu > 1e10 * (1.0 + abs(obj)) or \
                mu > 1e8 * (1.0 + mu0) or not np.all(np.isfinite(x)):
            break

        w = np.clip(z / s, 1e-16, 1e16)
        gw = g.multiply(w[:, None]).tocsc()
        block = (p + gt @ gw).tocsc()
        if me:
            kkt0 = sp.bmat([[block, a.T], [a, None]], format="csc")
            kkt = sp.bmat([[block + reg * sp.eye(n), a.T],
                           [a, -reg * sp.eye(me)]], format="csc")
        else:
            kkt0 = block
            kkt = (block + reg * sp.eye(n)).tocsc()
        try:
            lu = spla.splu(kkt)
        except RuntimeError:
            if best_merit <= 1e4 * tol:
                break  # endgame factorization breakdown; use the best iterate
            reg *= 100.0
            if reg > 1e-2 * scale_mat:
                break
            continue

        def solve_kkt(rhs):
            sol = lu.solve(rhs)
            sol += lu.solve(rhs - kkt0 @ sol)
            return sol

        # predictor
        rc = s * z
        rhs_x = -rd - gt @ (w * rg - rc / s)
        rhs = np.concatenate([rhs_x, -rp]) if me else rhs_x
        sol = solve_kkt(rhs)
        dx = sol[:n]
        dy = sol[n:] if me else np.zeros(0)
        ds = -rg - g @ dx
        dz = -rc / s - w * ds
        if not (np.all(np.isfinite(ds)) and np.all(np.isfinite(dz))):
            break  # machine-precision endgame; fall through to the stall exit
        ap = _max_step(s, ds)
        ad = _max_step(z, dz)
        alpha_aff = min(1.0, ap, ad)
        mu_aff = float((s + alpha_aff * ds) @ (z + alpha_aff * dz)) / mi
        sigma = np.clip((mu_aff / mu) ** 3, 0.0, 1.0) if mu > 0 else 0.0

        # corrector
        rc = s * z + ds * dz - sigma * mu
        rhs_x = -rd - gt @ (w * rg - rc / s)
        rhs = np.concatenate([rhs_x, -rp]) if me else rhs_x
        sol = solve_kkt(rhs)
        dx = sol[:n]
        dy = sol[n:] if me else np.zeros(0)
        ds = -rg - g @ dx
        dz = -rc / s - w * ds
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(ds))
                and np.all(np.isfinite(dz))):
            break  # machine-precision endgame; fall through to the stall exit
        alpha_p = min(1.0, 0.995 * _max_step(s, ds))
        alpha_d = min(1.0, 0.995 * _max_step(z, dz))
        x = x + alpha_p * dx
        s = s + alpha_p * ds
        y = y + alpha_d * dy
        z = z + alpha_d * dz

    if best_snap is None:
        return None
    # Stalled (or ran out of iterations) near the solution: polishing the
    # best iterate onto its active set usually reaches machine precision;
    # failing that, accept it under a modestly relaxed residual bound.
    x, y, z, s = best_snap
    rd, rp, rg = _kkt_residuals(p, q, a, b, g, h, x, y, z, s)
    obj = float(0.5 * x @ (p @ x) + q @ x)
    sd = 1.0 + float(max(np.max(np.abs(q), initial=0.0),
                         np.max(np.abs(p @ x), initial=0.0),
                         np.max(np.abs(gt @ z), initial=0.0),
                         np.max(np.abs(a.T @ y), initial=0.0) if me else 0.0))
    sp_ = 1.0 + float(max(np.max(np.abs(b), initial=0.0),
                          np.max(np.abs(h), initial=0.0),
                          np.max(np.abs(g @ x), initial=0.0)))
    gap = float(s @ z)
    refined = _polish(p, q, a, b, g, h, x, y, z, s, tol)
    if refined is not None:
        xp, yp, zp, sn = refined
        rd2, rp2, rg2 = _kkt_residuals(p, q, a, b, g, h, xp, yp, zp, sn)
        if _DEBUG:
            print(f"qp stall-polish rd={np.max(np.abs(rd2), initial=0.0):.2e}"
                  f"/{tol * sd:.1e} rp={np.max(np.abs(rp2), initial=0.0):.2e}"
                  f" rg={np.max(np.abs(rg2), initial=0.0):.2e}/{tol * sp_:.1e}"
                  f" gap={float(sn @ zp):.2e}")
        if np.max(np.abs(rd2), initial=0.0) <= tol * sd and \
           np.max(np.abs(rp2), initial=0.0) <= tol * sp_ and \
           np.max(np.abs(rg2), initial=0.0) <= 10.0 * tol * sp_ and \
           float(sn @ zp) <= gap + tol * (1.0 + abs(obj)) * 10.0:
            obj2 = float(0.5 * xp @ (p @ xp) + q @ xp)
            if _DEBUG:
                print(f"qp stall-polish accepted at it={it}")
            return QpResult("optimal", xp, obj2, y=yp, z=zp, iterations=it,
                            residuals={"dual": float(np.max(np.abs(rd2), initial=0.0)),
                                       "primal": float(max(np.max(np.abs(rp2), initial=0.0),
                                                           np.max(np.abs(rg2), initial=0.0))),
                                       "gap": float(sn @ zp)})
    if best_merit <= 50.0 * tol:
        if _DEBUG:
            print(f"qp stall accepted raw best merit={best_merit:.2e}")
        return QpResult("optimal", x, obj, y=y, z=z, iterations=it,
                        residuals={"dual": float(np.max(np.abs(rd), initial=0.0)),
                                   "primal": float(max(np.max(np.abs(rp), initial=0.0),
                                                       np.max(np.abs(rg), initial=0.0))),
                                   "gap": gap})
    return None


def _elastic_verdict(p, q, a, b, g, h, tol, max_iter) -> QpResult:
    """Decide feasibility by solving an always-feasible elastic relaxation."""
    n = q.size
    me, mi = a.shape[0], g.shape[0]
    if me:
        lsq = spla.lsqr(a, b, atol=1e-12, btol=1e-12)
        if lsq[3] > 1e-7 * (1.0 + np.linalg.norm(b)):
            return QpResult("infeasible", None, None)
    scale = 1.0 + float(np.max(np.abs(q), initial=0.0)) + (abs(p).max() if p.nnz else 0.0)
    pen = 1e6 * scale
    p_e = sp.block_diag([p, sp.csc_matrix((mi, mi))], format="csc")
    q_e = np.concatenate([q, np.full(mi, pen)])
    a_e = sp.hstack([a, sp.csc_matrix((me, mi))], format="csc") if me else None
    g_rows = sp.hstack([g, -sp.eye(mi, format="csc")], format="csc")
    lb_e = np.concatenate([np.full(n, -_INF), np.zeros(mi)])
    res = _mehrotra(p_e, q_e, a_e if a_e is not None else sp.csc_matrix((0, n + mi)),
                    b, sp.vstack([g_rows,
                                  sp.hstack([sp.csc_matrix((mi, n)), -sp.eye(mi, format="csc")])],
                                 format="csc"),
                    np.concatenate([h, np.zeros(mi)]), max(tol, 1e-8), max_iter)
    if res is None or not res.optimal:
        raise NumericalBreakdownError("elastic feasibility solve did not converge",
                                      {"n": n, "me": me, "mi": mi})
    t_max = float(np.max(res.x[n:], initial=0.0))
    h_scale = 1.0 + float(np.max(np.abs(h), initial=0.0))
    if t_max > 1e-6 * h_scale:
        return QpResult("infeasible", None, None, residuals={"violation": t_max})
    # The problem is feasible after all: retry the plain solve from scratch
    # with a looser tolerance before giving up.
    res2 = _mehrotra(p, q, a, b, g, h, max(tol, 1e-8), 2 * max_iter)
    if res2 is not None:
        return res2
    raise NumericalBreakdownError("feasible problem, but interior point failed twice",
                                  {"elastic_violation": t_max})
