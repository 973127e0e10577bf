"""Finite-horizon mixed-integer MPC assembly and the receding-horizon loop.

The optimal control problem keeps the predicted states as decision variables
(sparse non-condensed form) so one code path serves every grid size.  The
decision vector is laid out as

    [ u_0 .. u_{N-1} | d_0 .. d_{N-1} | x_0 .. x_N | eps_0 .. eps_N ]

with d the one-hot destination-mode vectors (the Boolean block), x the state
trajectory and eps per-instant slack on the soft upper state bound.  The
constraint matrices are structurally constant across controller steps: rows
whose right-hand side depends on past applied activators are always present
(vacuous when the history does not reach back far enough), so a controller
builds the problem once and only rewrites two right-hand-side vectors per
sample.

The receding-horizon loop skips re-optimization while a mode switch is in
progress: inputs are forced to zero for the whole setup duration anyway, so
the controller simply holds the committed activator until the setup time has
elapsed, then resumes solving.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .admissibility import assure_admissibility
from .constraints import input_sum_matrix
from .digraph import setup_constraint_matrices
from .errors import NumericalBreakdownError, SolverFailedError
from .miqp import MiqpProblem, MiqpSolution, solve_miqp
from .model import SwitchedActuatorModel

_INF = float("inf")


class ShortHorizonWarning(UserWarning):
    """The horizon does not exceed the largest setup time.

    The loop still runs correctly — switches simply occupy most of each
    prediction window — but tracking performance degrades because the
    optimizer can rarely see the payoff of a switch before the window ends.
    """


@dataclass
class MpcConfig:
    """Parameters of the finite-horizon tracking problem.

    ``h`` selects the performance variables (0/1 matrix, one 1 per row,
    distinct state indices); ``q_weight`` is the tracking weight over those
    variables (scalar shorthand for a multiple of the identity);
    ``reference`` is the target value per performance variable;
    ``x_upper`` the soft upper bound on every state entry (scalar, vector,
    or None to disable the soft rows); ``slack_penalty`` the linear price of
    violating it.
    """

    horizon: int
    h: np.ndarray
    q_weight: object = 1.0
    reference: object = 0.0
    slack_penalty: float = 10.0
    x_upper: object = None
    gap: float = 1e-6
    node_limit: int = 200_000
    warm_start: bool = True
    #: Solve over the state-eliminated problem (much faster on large grids);
    #: the sparse form gives identical answers and stays available for
    #: inspection and export.
    condense: bool = True

    def __post_init__(self):
        self.horizon = int(self.horizon)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 2:
            raise ValueError("performance selector must be a 2-d array")
        if not np.all((h == 0) | (h == 1)) or not np.all(h.sum(axis=1) == 1):
            raise ValueError("performance selector rows must be one-hot")
        cols = np.argmax(h, axis=1)
        if np.unique(cols).size != cols.size:
            raise ValueError("performance selector rows must pick distinct states")
        self.h = h
        n_z = h.shape[0]
        qw = np.asarray(self.q_weight, dtype=float)
        self.q_weight = qw * np.eye(n_z) if qw.ndim == 0 else qw
        if self.q_weight.shape != (n_z, n_z):
            raise ValueError("tracking weight shape does not match the selector")
        self.reference = np.broadcast_to(
            np.asarray(self.reference, dtype=float), (n_z,)).copy()
        self.slack_penalty = float(self.slack_penalty)
        if self.slack_penalty <= 0:
            raise ValueError("slack penalty must be positive")

    @property
    def n_z(self) -> int:
        return self.h.shape[0]

    def state_bound(self, n_x: int) -> np.ndarray | None:
        if self.x_upper is None:
            return None
        return np.broadcast_to(np.asarray(self.x_upper, dtype=float), (n_x,)).copy()


@dataclass
class OcpInstance:
    """Assembled MIQP plus the index maps into its decision vector.

    ``update`` rewrites the state-estimate and activator-history entries of
    the right-hand sides in place; matrix structure never changes, which is
    what makes the instance cacheable across controller steps.
    """

    problem: MiqpProblem
    horizon: int
    n_u: int
    n_modes: int
    n_x: int
    objective_offset: float
    hist_entries: list  # (row, prediction step i, lag tau, mode, scale)
    cap_scale: float
    s_mats: tuple = ()

    def u_slice(self, i: int) -> slice:
        return slice(i * self.n_u, (i + 1) * self.n_u)

    def delta_slice(self, i: int) -> slice:
        o = self.horizon * self.n_u
        return slice(o + i * self.n_modes, o + (i + 1) * self.n_modes)

    def x_slice(self, i: int) -> slice:
        o = self.horizon * (self.n_u + self.n_modes)
        return slice(o + i * self.n_x, o + (i + 1) * self.n_x)

    def eps_index(self, i: int) -> int:
        return self.horizon * (self.n_u + self.n_modes) + (self.horizon + 1) * self.n_x + i

    def inputs_of(self, xvec: np.ndarray) -> np.ndarray:
        return xvec[: self.horizon * self.n_u].reshape(self.horizon, self.n_u)

    def activators_of(self, xvec: np.ndarray) -> np.ndarray:
        o = self.horizon * self.n_u
        return xvec[o: o + self.horizon * self.n_modes].reshape(self.horizon, self.n_modes)

    def states_of(self, xvec: np.ndarray) -> np.ndarray:
        o = self.horizon * (self.n_u + self.n_modes)
        return xvec[o: o + (self.horizon + 1) * self.n_x].reshape(self.horizon + 1, self.n_x)

    def slacks_of(self, xvec: np.ndarray) -> np.ndarray:
        return xvec[self.eps_index(0):]

    def ocp_objective(self, xvec: np.ndarray) -> float:
        return self.problem.objective(xvec) + self.objective_offset

    def plan_vector(self, model, x_hat, u_traj, d_traj, x_bar) -> np.ndarray:
        n = self.horizon
        vec = np.zeros(self.problem.n_var)
        vec[: n * self.n_u] = np.asarray(u_traj, dtype=float).ravel()
        vec[self.delta_slice(0).start: self.delta_slice(n - 1).stop] = \
            np.asarray(d_traj, dtype=float).ravel()
        x_i = np.asarray(x_hat, dtype=float).ravel()
        for i in range(n + 1):
            vec[self.x_slice(i)] = x_i
            if x_bar is not None:
                vec[self.eps_index(i)] = max(0.0, float(np.max(x_i - x_bar)))
            if i < n:
                x_i = model.a @ x_i + model.b @ u_traj[i]
        return vec

    def update(self, x_hat: np.ndarray, history) -> None:
        """Point the instance at a new state estimate and activator history.

        ``history`` holds the applied activators in chronological order
        (most recent last); missing entries — time before the run started —
        leave their rows vacuous.
        """
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        if x_hat.size != self.n_x:
            raise ValueError(f"state estimate has size {x_hat.size}, expected {self.n_x}")
        self.problem.b_eq[: self.n_x] = x_hat
        _apply_history(self.problem, self.hist_entries, self.s_mats, history)


@dataclass
class _ContinuousParts:
    """Shared horizon blocks: cost, dynamics equalities, soft state bounds.

    Parameterized by the width of the per-step Boolean block so the compact
    activator formulation and the lifted-mode baseline build byte-identical
    continuous constraint rows around differently sized Boolean vectors.
    """

    n_var: int
    o_d: int
    o_x: int
    o_e: int
    p: sp.csc_matrix
    q_vec: np.ndarray
    offset: float
    eq_rows: list
    b_eq_core: np.ndarray
    g_parts: list
    h_parts: list
    lb: np.ndarray
    ub: np.ndarray


def continuous_parts(model: SwitchedActuatorModel, cfg: MpcConfig,
                     n_bool: int) -> _ContinuousParts:
    """Assemble the Boolean-agnostic part of the horizon problem.

    Decision layout ``[u | bool | x | eps]`` with ``n_bool`` Boolean entries
    per step.  Cost: sum over i = 0..N of (H x_i - ref)' Q (H x_i - ref)
    plus the linear slack penalty.  Equalities: initial condition and
    dynamics.  Inequalities: the soft state upper bound.  Bounds: input box,
    Booleans in [0, 1], states free, slacks nonnegative.
    """
    n = cfg.horizon
    n_u, n_x = model.n_u, model.n_x
    if cfg.h.shape[1] != n_x:
        raise ValueError(f"performance selector has {cfg.h.shape[1]} columns "
                         f"for a {n_x}-state model")
    n_var = n * n_u + n * n_bool + (n + 1) * n_x + (n + 1)
    o_d = n * n_u
    o_x = o_d + n * n_bool
    o_e = o_x + (n + 1) * n_x

    # objective
    hqh = 2.0 * cfg.h.T @ cfg.q_weight @ cfg.h
    q_vec = np.zeros(n_var)
    x_lin = -2.0 * cfg.h.T @ (cfg.q_weight @ cfg.reference)
    p_x = sp.kron(sp.eye(n + 1), sp.csc_matrix(hqh), format="csc")
    p = sp.bmat([
        [sp.csc_matrix((o_x, o_x)), None, None],
        [None, p_x, None],
        [None, None, sp.csc_matrix((n + 1, n + 1))],
    ], format="csc")
    for i in range(n + 1):
        q_vec[o_x + i * n_x: o_x + (i + 1) * n_x] = x_lin
        q_vec[o_e + i] = cfg.slack_penalty
    offset = float((n + 1) * (cfg.reference @ cfg.q_weight @ cfg.reference))

    # equalities: [ x_0 = x_hat | dynamics ]
    a_sp = sp.csr_matrix(model.a)
    b_sp = sp.csr_matrix(model.b)
    eq_rows = []
    eye_x = sp.eye(n_x, format="csr")
    init = sp.hstack([sp.csr_matrix((n_x, o_x)), eye_x,
                      sp.csr_matrix((n_x, n_var - o_x - n_x))], format="csr")
    eq_rows.append(init)
    for i in range(n):
        row = sp.lil_matrix((n_x, n_var))
        row[:, i * n_u:(i + 1) * n_u] = -b_sp
        row[:, o_x + i * n_x: o_x + (i + 1) * n_x] = -a_sp
        row[:, o_x + (i + 1) * n_x: o_x + (i + 2) * n_x] = eye_x
        eq_rows.append(row.tocsr())
    b_eq_core = np.zeros((n + 1) * n_x)

    # inequalities: soft state upper bound
    g_parts = []
    h_parts = []
    x_bar = cfg.state_bound(n_x)
    if x_bar is not None:
        for i in range(n + 1):
            row = sp.lil_matrix((n_x, n_var))
            row[:, o_x + i * n_x: o_x + (i + 1) * n_x] = eye_x
            row[:, o_e + i] = -1.0
            g_parts.append(row.tocsr())
            h_parts.append(x_bar)

    lb = np.concatenate([
        np.tile(model.u_lower, n), np.zeros(n * n_bool),
        np.full((n + 1) * n_x, -_INF), np.zeros(n + 1),
    ])
    ub = np.concatenate([
        np.tile(model.u_upper, n), np.ones(n * n_bool),
        np.full((n + 1) * n_x, _INF), np.full(n + 1, _INF),
    ])
    return _ContinuousParts(n_var=n_var, o_d=o_d, o_x=o_x, o_e=o_e, p=p,
                            q_vec=q_vec, offset=offset, eq_rows=eq_rows,
                            b_eq_core=b_eq_core, g_parts=g_parts,
                            h_parts=h_parts, lb=lb, ub=ub)


def _activator_rows(model: SwitchedActuatorModel, n: int, n_var: int,
                    o_d: int, gate_row0: int, prune: bool):
    """One-hot equality rows and setup-gate inequality rows.

    The rows live over a decision vector whose first ``n * n_u`` entries are
    the stacked inputs and whose activator block starts at ``o_d``; the state
    layout beyond that is irrelevant, so the sparse and condensed builders
    share this.  Gate rows whose lag reaches behind the current time are
    recorded in ``hist_entries`` (absolute row numbers starting at
    ``gate_row0``) for per-sample right-hand-side rewrites.
    """
    n_u, n_q = model.n_u, model.n_modes
    s_bar = model.graph.max_setup
    gates = setup_constraint_matrices(model.graph)
    cap = float(model.sum_bound)
    j_u = input_sum_matrix(model)

    onehot = sp.lil_matrix((n, n_var))
    for i in range(n):
        onehot[i, o_d + i * n_q: o_d + (i + 1) * n_q] = 1.0

    g_parts, h_parts, hist_entries = [], [], []
    gate_row = gate_row0
    kept = {0: list(range(n_q))}
    for tau in range(1, s_bar + 1):
        cols = gates.all_ones_columns(tau) if prune else np.zeros(n_q, dtype=bool)
        kept[tau] = [q for q in range(n_q) if not cols[q]]
    for i in range(n):
        for tau in range(0, s_bar + 1):
            for q in kept[tau]:
                row = sp.lil_matrix((1, n_var))
                cols = j_u[q].nonzero()[1] if sp.issparse(j_u) else np.flatnonzero(j_u[q])
                for c in cols:
                    row[0, i * n_u + c] = 1.0
                rhs = 0.0
                if tau == 0:
                    row[0, o_d + i * n_q + q] = -cap
                else:
                    j = i - tau
                    if j >= 0:
                        s_col = gates.matrix(tau)[:, q]
                        for r in np.flatnonzero(s_col):
                            row[0, o_d + j * n_q + r] = -cap
                    else:
                        hist_entries.append((gate_row, i, tau, q, cap))
                        rhs = cap
                g_parts.append(row.tocsr())
                h_parts.append(np.array([rhs]))
                gate_row += 1
    return onehot.tocsr(), g_parts, h_parts, hist_entries, gates, cap


def build_ocp(model: SwitchedActuatorModel, cfg: MpcConfig, x_hat,
              history=(), *, prune: bool = True) -> OcpInstance:
    """Assemble the horizon-``N`` tracking MIQP for the given model.

    Continuous blocks come from :func:`continuous_parts`; the Boolean part
    adds one-hot activator sums and the setup gates in uniform sum form (one
    row per mode and lag), with lags that reach behind the current time
    taking their right-hand side from the applied-activator history.  With
    ``prune`` the gate rows that are implied by the lag-0 rows (all source
    modes already reach the target mode within the lag) are dropped.
    """
    if not model.one_sided or model.sum_bound is None:
        raise NotImplementedError(
            "the uniform gate form needs one-sided inputs and a total input cap")
    n = cfg.horizon
    n_u, n_q, n_x = model.n_u, model.n_modes, model.n_x
    s_bar = model.graph.max_setup

    parts = continuous_parts(model, cfg, n_q)
    n_var, o_d = parts.n_var, parts.o_d

    soft_rows = sum(m.shape[0] for m in parts.g_parts)
    onehot, gate_g, gate_h, hist_entries, gates, cap = _activator_rows(
        model, n, n_var, o_d, soft_rows, prune)

    # equalities: [ continuous | one-hot sums ]
    a_eq = sp.vstack(parts.eq_rows + [onehot], format="csr")
    b_eq = np.concatenate([parts.b_eq_core, np.ones(n)])

    # inequalities: [ soft bounds | setup gates ]
    g_parts = list(parts.g_parts) + gate_g
    h_parts = list(parts.h_parts) + gate_h
    g = sp.vstack(g_parts, format="csr") if g_parts else None
    h = np.concatenate(h_parts) if h_parts else None
    bool_idx = np.arange(o_d, o_d + n * n_q, dtype=np.int64)

    problem = MiqpProblem(p=parts.p, q=parts.q_vec, a_eq=a_eq, b_eq=b_eq,
                          g=g, h=h, lb=parts.lb, ub=parts.ub, bool_idx=bool_idx)
    problem.validate()
    inst = OcpInstance(problem=problem, horizon=n, n_u=n_u, n_modes=n_q, n_x=n_x,
                       objective_offset=parts.offset, hist_entries=hist_entries,
                       cap_scale=cap, s_mats=gates.matrices)
    inst.update(x_hat, list(history)[-s_bar:] if s_bar else [])
    return inst


def _apply_history(problem: MiqpProblem, hist_entries, s_mats, history) -> None:
    hist_modes = [int(np.argmax(np.asarray(hv))) for hv in history]
    n_h = len(hist_modes)
    for row, i, tau, q, scale in hist_entries:
        idx = n_h + (i - tau)
        if idx >= 0:
            problem.h[row] = scale * float(s_mats[tau - 1][hist_modes[idx], q])
        else:
            problem.h[row] = scale


@dataclass
class _CondensedCore:
    """State-eliminated continuous blocks shared by both Boolean encodings.

    Same role as :class:`_ContinuousParts` for the condensed layout
    ``[u | bool | eps]``: cost (quadratic input coupling plus slack
    penalty), soft-bound rows through the input-to-state response, bounds,
    and the operators ``update`` needs per sample.
    """

    n_var: int
    o_d: int
    o_e: int
    p: sp.csc_matrix
    q_core: np.ndarray
    g_soft: list
    h_soft: list
    lb: np.ndarray
    ub: np.ndarray
    a_mat: sp.csr_matrix
    gamma: np.ndarray


def condensed_core(model: SwitchedActuatorModel, cfg: MpcConfig,
                   n_bool: int) -> _CondensedCore:
    n = cfg.horizon
    n_u, n_x, n_z = model.n_u, model.n_x, cfg.n_z
    if cfg.h.shape[1] != n_x:
        raise ValueError(f"performance selector has {cfg.h.shape[1]} columns "
                         f"for a {n_x}-state model")
    a_mat = sp.csr_matrix(model.a)
    b_dense = model.b.toarray() if sp.issparse(model.b) else np.asarray(model.b, dtype=float)

    n_var = n * n_u + n * n_bool + (n + 1)
    o_d = n * n_u
    o_e = o_d + n * n_bool

    # performance response blocks: H A^i and C_k = H A^k B
    m_blocks = np.empty((n + 1, n_z, n_x))
    m_blocks[0] = cfg.h
    a_t = a_mat.T.tocsr()
    for i in range(n):
        m_blocks[i + 1] = (a_t @ m_blocks[i].T).T
    c_blocks = m_blocks[:n] @ b_dense

    gamma = np.zeros(((n + 1) * n_z, n * n_u))
    for i in range(1, n + 1):
        for j in range(i):
            gamma[i * n_z:(i + 1) * n_z, j * n_u:(j + 1) * n_u] = c_blocks[i - 1 - j]
    g3 = gamma.reshape(n + 1, n_z, n * n_u)
    qg = np.einsum("ab,ibc->iac", cfg.q_weight, g3).reshape((n + 1) * n_z, n * n_u)
    p_uu = 2.0 * gamma.T @ qg
    p_uu = 0.5 * (p_uu + p_uu.T)
    p = sp.bmat([
        [sp.csc_matrix(p_uu), None],
        [None, sp.csc_matrix((n_var - o_d, n_var - o_d))],
    ], format="csc")
    q_core = np.zeros(n_var)
    q_core[o_e:] = cfg.slack_penalty

    # soft state bound through the full-state response D_k = A^k B
    g_soft, h_soft = [], []
    x_bar = cfg.state_bound(n_x)
    if x_bar is not None:
        d_blocks = np.empty((n, n_x, n_u))
        d_blocks[0] = b_dense
        for k in range(1, n):
            d_blocks[k] = a_mat @ d_blocks[k - 1]
        for i in range(n + 1):
            blk = np.zeros((n_x, n_var))
            for j in range(i):
                blk[:, j * n_u:(j + 1) * n_u] = d_blocks[i - 1 - j]
            blk[:, o_e + i] = -1.0
            g_soft.append(sp.csr_matrix(blk))
            h_soft.append(np.zeros(n_x))

    lb = np.concatenate([np.tile(model.u_lower, n), np.zeros(n * n_bool),
                         np.zeros(n + 1)])
    ub = np.concatenate([np.tile(model.u_upper, n), np.ones(n * n_bool),
                         np.full(n + 1, _INF)])
    return _CondensedCore(n_var=n_var, o_d=o_d, o_e=o_e, p=p, q_core=q_core,
                          g_soft=g_soft, h_soft=h_soft, lb=lb, ub=ub,
                          a_mat=a_mat, gamma=gamma)


def condensed_tracking_update(problem: MiqpProblem, x_hat: np.ndarray,
                              horizon: int, n_u: int, a_mat, gamma,
                              h_mat, q_w, ref, x_bar) -> float:
    """Rewrite the estimate-dependent entries of a condensed problem.

    Rolls the free state response forward one sparse matrix-vector product
    per step, filling the tracking gradient, the soft-bound right-hand
    sides (rows ``[0, (horizon+1) n_x)`` when a bound is set), and
    returning the constant cost term.
    """
    n, n_z = horizon, h_mat.shape[0]
    n_x = x_hat.size
    err = np.empty((n + 1) * n_z)
    v = x_hat
    for i in range(n + 1):
        err[i * n_z:(i + 1) * n_z] = h_mat @ v - ref
        if x_bar is not None:
            problem.h[i * n_x:(i + 1) * n_x] = x_bar - v
        if i < n:
            v = a_mat @ v
    qerr = (err.reshape(n + 1, n_z) @ q_w).ravel()
    problem.q[: n * n_u] = 2.0 * (gamma.T @ qerr)
    return float(err @ qerr)


@dataclass
class CondensedOcpInstance:
    """Tracking MIQP with the predicted states eliminated.

    Substituting the dynamics into the cost and the soft bound leaves the
    decision vector ``[u | d | eps]``; the quadratic input coupling and the
    input-to-state response blocks are precomputed once, so ``update``
    reduces to a handful of matrix-vector products.  Node QPs shrink from
    ``O(N n_x)`` to ``O(N n_u)`` variables, which is what makes receding-
    horizon runs on fine grids affordable; the sparse form
    (:class:`OcpInstance`) remains the reference and export layout.
    """

    problem: MiqpProblem
    horizon: int
    n_u: int
    n_modes: int
    n_x: int
    objective_offset: float
    hist_entries: list
    cap_scale: float
    s_mats: tuple
    a_mat: sp.csr_matrix
    gamma: np.ndarray
    h_mat: np.ndarray
    q_w: np.ndarray
    ref: np.ndarray
    x_bar: np.ndarray | None

    def u_slice(self, i: int) -> slice:
        return slice(i * self.n_u, (i + 1) * self.n_u)

    def delta_slice(self, i: int) -> slice:
        o = self.horizon * self.n_u
        return slice(o + i * self.n_modes, o + (i + 1) * self.n_modes)

    def eps_index(self, i: int) -> int:
        return self.horizon * (self.n_u + self.n_modes) + i

    def inputs_of(self, xvec: np.ndarray) -> np.ndarray:
        return xvec[: self.horizon * self.n_u].reshape(self.horizon, self.n_u)

    def activators_of(self, xvec: np.ndarray) -> np.ndarray:
        o = self.horizon * self.n_u
        return xvec[o: o + self.horizon * self.n_modes].reshape(self.horizon, self.n_modes)

    def slacks_of(self, xvec: np.ndarray) -> np.ndarray:
        return xvec[self.eps_index(0):]

    def ocp_objective(self, xvec: np.ndarray) -> float:
        return self.problem.objective(xvec) + self.objective_offset

    def plan_vector(self, model, x_hat, u_traj, d_traj, x_bar) -> np.ndarray:
        n = self.horizon
        vec = np.zeros(self.problem.n_var)
        vec[: n * self.n_u] = np.asarray(u_traj, dtype=float).ravel()
        vec[self.delta_slice(0).start: self.delta_slice(n - 1).stop] = \
            np.asarray(d_traj, dtype=float).ravel()
        x_i = np.asarray(x_hat, dtype=float).ravel()
        for i in range(n + 1):
            if x_bar is not None:
                vec[self.eps_index(i)] = max(0.0, float(np.max(x_i - x_bar)))
            if i < n:
                x_i = model.a @ x_i + model.b @ u_traj[i]
        return vec

    def update(self, x_hat: np.ndarray, history) -> None:
        """Refresh every entry that depends on the estimate or the history.

        The free state response is rolled forward step by step (no stored
        powers of ``A``), feeding both the tracking gradient / constant term
        and the soft-bound right-hand sides.
        """
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        if x_hat.size != self.n_x:
            raise ValueError(f"state estimate has size {x_hat.size}, expected {self.n_x}")
        self.objective_offset = condensed_tracking_update(
            self.problem, x_hat, self.horizon, self.n_u, self.a_mat,
            self.gamma, self.h_mat, self.q_w, self.ref, self.x_bar)
        _apply_history(self.problem, self.hist_entries, self.s_mats, history)


def build_condensed_ocp(model: SwitchedActuatorModel, cfg: MpcConfig, x_hat,
                        history=(), *, prune: bool = True) -> CondensedOcpInstance:
    """Assemble the state-eliminated form of :func:`build_ocp`.

    Equivalent problem over ``[u | d | eps]``: the cost and the soft state
    bound are expressed through the input-response operators, the activator
    rows are shared with the sparse builder, and both forms yield the same
    optimizer and objective (up to solver tolerance).
    """
    if not model.one_sided or model.sum_bound is None:
        raise NotImplementedError(
            "the uniform gate form needs one-sided inputs and a total input cap")
    n = cfg.horizon
    n_u, n_q, n_x = model.n_u, model.n_modes, model.n_x
    s_bar = model.graph.max_setup

    core = condensed_core(model, cfg, n_q)
    n_var, o_d = core.n_var, core.o_d
    soft_rows = sum(m.shape[0] for m in core.g_soft)

    onehot, gate_g, gate_h, hist_entries, gates, cap = _activator_rows(
        model, n, n_var, o_d, soft_rows, prune)
    g_parts = core.g_soft + gate_g
    h_parts = core.h_soft + gate_h
    g = sp.vstack(g_parts, format="csr") if g_parts else None
    h = np.concatenate(h_parts) if h_parts else None
    bool_idx = np.arange(o_d, o_d + n * n_q, dtype=np.int64)

    problem = MiqpProblem(p=core.p, q=core.q_core, a_eq=onehot, b_eq=np.ones(n),
                          g=g, h=h, lb=core.lb, ub=core.ub, bool_idx=bool_idx)
    problem.validate()
    inst = CondensedOcpInstance(
        problem=problem, horizon=n, n_u=n_u, n_modes=n_q, n_x=n_x,
        objective_offset=0.0, hist_entries=hist_entries, cap_scale=cap,
        s_mats=gates.matrices, a_mat=core.a_mat, gamma=core.gamma, h_mat=cfg.h,
        q_w=cfg.q_weight, ref=cfg.reference, x_bar=cfg.state_bound(n_x))
    inst.update(x_hat, list(history)[-s_bar:] if s_bar else [])
    return inst


def formulation_counts(model: SwitchedActuatorModel, horizon: int) -> dict:
    """Structural size of the per-horizon formulation (closed-form).

    Returns Boolean variable count, integer equality rows (one-hot sums),
    setup-gate inequality rows before and after pruning.  The numbers refer
    to the generic step (full history available); they match the rows a
    built instance carries.
    """
    n_q = model.n_modes
    s_bar = model.graph.max_setup
    gates = setup_constraint_matrices(model.graph)
    pruned_per_step = sum(int(gates.all_ones_columns(tau).sum())
                          for tau in range(1, s_bar + 1))
    total = n_q * (1 + s_bar) * horizon
    return {
        "booleans": n_q * horizon,
        "integer_equalities": horizon,
        "setup_inequalities": total,
        "setup_inequalities_pruned": total - pruned_per_step * horizon,
    }


def assure_horizon(activators, u, model: SwitchedActuatorModel,
                   history=None, initial_mode: int | None = None) -> np.ndarray:
    """Repair a solver-optimal activator plan into an admissible one.

    The inputs are untouched and the tracking objective is unchanged (it
    carries no activator term), so this is a free post-processing step.
    """
    return assure_admissibility(u=u, activators=activators, model=model,
                                history=history, initial_mode=initial_mode)


@dataclass
class StepResult:
    """One closed-loop controller sample."""

    delta: np.ndarray
    u: np.ndarray
    destination: int
    solved: bool
    safe_hold: bool
    objective: float | None
    slack: float
    stats: MiqpSolution | None
    #: True while the actuator is repositioning (including the sample that
    #: starts the switch); measurements taken over such samples are invalid.
    switching: bool = False

    @property
    def nodes(self) -> int:
        return 0 if self.stats is None else self.stats.nodes

    @property
    def qp_solves(self) -> int:
        return 0 if self.stats is None else self.stats.qp_solves


class Controller:
    """Receding-horizon loop with setup-time skip logic.

    While a committed switch is under way (fewer samples elapsed than its
    setup time) no optimization runs: the activator is held and the input is
    zero, which is exactly what every feasible plan would do anyway.  On
    solver failure the controller falls back to holding the activator with
    zero input (always admissible) and records the failure.

    With ``initial_mode=None`` (default) the first optimization picks the
    starting operational mode freely — the lag conditions vanish at time
    zero, so no setup is owed.  Passing a mode pins the actuator physically:
    the constraint history is seeded as if the actuator had been sitting in
    that mode, so leaving it costs the full setup time.
    """

    def __init__(self, model: SwitchedActuatorModel, cfg: MpcConfig,
                 initial_mode: int | None = None):
        if initial_mode is not None and not 0 <= initial_mode < model.n_modes:
            raise ValueError(f"initial mode {initial_mode} out of range")
        s_bar = model.graph.max_setup
        if cfg.horizon <= s_bar:
            warnings.warn(
                f"horizon {cfg.horizon} does not exceed the largest setup time "
                f"{s_bar}; switches will dominate each prediction window",
                ShortHorizonWarning, stacklevel=2)
        self.model = model
        self.cfg = cfg
        builder = build_condensed_ocp if cfg.condense else build_ocp
        self.instance = builder(model, cfg, np.zeros(model.n_x), [])
        self.k = 0
        self.k_t = 0
        self.s_t = 0
        self.solves = 0
        self._destination: int | None = None if initial_mode is None else int(initial_mode)
        self._history: deque = deque(maxlen=s_bar if s_bar else 1)
        if initial_mode is not None:
            for _ in range(s_bar):
                self._history.append(self._one_hot(int(initial_mode)))
        self._prev_plan: tuple[int, np.ndarray, np.ndarray] | None = None
        self._x_bar = cfg.state_bound(model.n_x)

    @property
    def destination(self) -> int | None:
        return self._destination

    def history(self) -> list[np.ndarray]:
        return list(self._history)

    def _one_hot(self, mode: int) -> np.ndarray:
        v = np.zeros(self.model.n_modes, dtype=np.int64)
        v[mode] = 1
        return v

    def _slack_now(self, x_hat: np.ndarray) -> float:
        if self._x_bar is None:
            return 0.0
        return float(max(0.0, np.max(x_hat - self._x_bar)))

    def _shift_candidate(self, x_hat: np.ndarray) -> np.ndarray | None:
        """Age the previous plan to the current sample as a feasible hint."""
        if self._prev_plan is None:
            return None
        k_prev, u_prev, d_prev = self._prev_plan
        shift = self.k - k_prev
        n = self.cfg.horizon
        if shift <= 0 or shift >= n:
            return None
        u_c = np.vstack([u_prev[shift:], np.zeros((shift, self.model.n_u))])
        d_c = np.vstack([d_prev[shift:], np.repeat(d_prev[-1:], shift, axis=0)])
        return self.instance.plan_vector(self.model, x_hat, u_c, d_c, self._x_bar)

    def _round_activators(self, d_traj: np.ndarray) -> np.ndarray:
        r = np.round(d_traj).astype(np.int64)
        if np.max(np.abs(d_traj - r)) > 1e-4 or np.any(r.sum(axis=1) != 1) or r.min() < 0:
            raise SolverFailedError("solver returned a non-integral activator block")
        return r

    def step(self, x_hat) -> StepResult:
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        slack = self._slack_now(x_hat)
        if self.k_t >= self.s_t:
            result = self._solve_step(x_hat, slack)
        else:
            result = StepResult(delta=self._one_hot(self._destination),
                                u=np.zeros(self.model.n_u),
                                destination=self._destination,
                                solved=False, safe_hold=False, objective=None,
                                slack=slack, stats=None)
        new_dest = result.destination
        if result.solved and not result.safe_hold and \
                self._destination is not None and new_dest != self._destination:
            self.k_t = 0
            self.s_t = int(self.model.graph.setup[self._destination, new_dest])
        self._destination = new_dest
        result.switching = self.k_t < self.s_t
        self._history.append(result.delta)
        self.k += 1
        self.k_t += 1
        return result

    def _solve_step(self, x_hat: np.ndarray, slack: float) -> StepResult:
        inst = self.instance
        inst.update(x_hat, self.history())
        hint = self._shift_candidate(x_hat) if self.cfg.warm_start else None
        hold_dest = 0 if self._destination is None else self._destination
        hold = StepResult(delta=self._one_hot(hold_dest),
                          u=np.zeros(self.model.n_u),
                          destination=hold_dest, solved=True,
                          safe_hold=True, objective=None, slack=slack, stats=None)
        try:
            sol = solve_miqp(inst.problem, gap=self.cfg.gap,
                             node_limit=self.cfg.node_limit, incumbent=hint)
        except NumericalBreakdownError:
            return hold
        self.solves += 1
        if not sol.ok or sol.x is None:
            hold.stats = sol
            return hold
        u_traj = inst.inputs_of(sol.x)
        try:
            d_traj = self._round_activators(inst.activators_of(sol.x))
            assured = assure_horizon(d_traj, u_traj, self.model,
                                     history=self.history(),
                                     initial_mode=self._destination)
        except Exception:
            hold.stats = sol
            return hold
        plan_vec = sol.x.copy()
        db = inst.delta_slice(0).start
        plan_vec[db: db + self.cfg.horizon * self.model.n_modes] = \
            assured.astype(float).ravel()
        self._prev_plan = (self.k, u_traj, assured)
        return StepResult(delta=assured[0].astype(np.int64),
                          u=u_traj[0].copy(),
                          destination=int(np.argmax(assured[0])),
                          solved=True, safe_hold=False,
                          objective=inst.ocp_objective(plan_vec),
                          slack=slack, stats=sol)
