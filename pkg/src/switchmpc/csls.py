"""Lifted-mode baseline encoding and its paired-comparison harness.

The compact formulation infers switch progress from the recent destination
choices; the classical alternative makes every switch phase an explicit
Boolean state.  Per step the Boolean vector ``beta`` stacks one entry per
operational mode followed by a chain of ``s`` entries per nonzero-setup arc
(row-major over ordered mode pairs), giving ``n_modes + s_sigma`` entries
where ``s_sigma`` is the sum of all setup times.  Feasible trajectories are
carved out by a one-hot row, chain-shift equalities, and arrival/start
inequalities tied to the previous step's Boolean vector.

The continuous blocks (dynamics, tracking cost, soft state bounds) are the
exact arrays used by the compact formulation, so closed-loop comparisons
between the two isolate the Boolean encoding.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .constraints import input_sum_matrix
from .errors import NumericalBreakdownError, SolverFailedError
from .miqp import MiqpProblem, solve_miqp
from .model import SwitchedActuatorModel
from .mpc import (MpcConfig, StepResult, condensed_core,
                  condensed_tracking_update, continuous_parts)

_INF = float("inf")


@dataclass(frozen=True)
class CslsModel:
    """Index map of the lifted Boolean state.

    ``arcs`` lists the nonzero-setup ordered mode pairs ``(q, r, s)`` in
    row-major order; arc ``j`` occupies ``chain_slice(j)`` of the per-step
    Boolean vector, stages 1..s, after the ``n_modes`` operational entries.
    """

    model: SwitchedActuatorModel
    arcs: tuple
    chain_starts: tuple

    @property
    def n_modes(self) -> int:
        return self.model.n_modes

    @property
    def s_sigma(self) -> int:
        return sum(s for _, _, s in self.arcs)

    @property
    def n_states(self) -> int:
        return self.n_modes + self.s_sigma

    def chain_slice(self, arc: int) -> slice:
        start = self.chain_starts[arc]
        return slice(start, start + self.arcs[arc][2])

    def stage_index(self, arc: int, stage: int) -> int:
        """Boolean index of chain entry ``stage`` (1-based) of ``arc``."""
        q, r, s = self.arcs[arc]
        if not 1 <= stage <= s:
            raise ValueError(f"stage {stage} outside 1..{s} for arc {(q, r)}")
        return self.chain_starts[arc] + stage - 1

    def arcs_into(self, q: int) -> list[int]:
        """Arc indices whose switch ends at mode ``q``."""
        return [j for j, (_, r, _) in enumerate(self.arcs) if r == q]

    def zero_setup_sources(self, q: int) -> list[int]:
        """Modes reaching ``q`` with zero setup (excluding ``q`` itself)."""
        setup = self.model.graph.setup
        return [r for r in range(self.n_modes)
                if r != q and setup[r, q] == 0]

    def operational_one_hot(self, q: int) -> np.ndarray:
        v = np.zeros(self.n_states, dtype=np.int64)
        v[q] = 1
        return v

    def describe(self, beta: np.ndarray) -> tuple[str, int]:
        """Classify a one-hot Boolean vector: kind and destination mode."""
        idx = int(np.argmax(beta))
        if idx < self.n_modes:
            return "operational", idx
        for j, (q, r, s) in enumerate(self.arcs):
            start = self.chain_starts[j]
            if start <= idx < start + s:
                return f"switch {q}->{r} stage {idx - start + 1}", r
        raise ValueError("index outside the Boolean layout")

    def destination_of(self, beta: np.ndarray) -> int:
        return self.describe(beta)[1]

    def advance(self, beta: np.ndarray) -> np.ndarray:
        """One automaton step: chains shift forward, final stages arrive,
        operational entries hold."""
        idx = int(np.argmax(beta))
        if idx < self.n_modes:
            return beta.copy()
        for j, (q, r, s) in enumerate(self.arcs):
            start = self.chain_starts[j]
            if start <= idx < start + s:
                nxt = np.zeros_like(beta)
                nxt[idx + 1 if idx - start + 1 < s else r] = 1
                return nxt
        raise ValueError("index outside the Boolean layout")


def build_csls(model: SwitchedActuatorModel) -> CslsModel:
    """Lay out the lifted Boolean state for ``model``'s setup digraph."""
    setup = model.graph.setup
    n_q = model.n_modes
    arcs = []
    starts = []
    pos = n_q
    for q in range(n_q):
        for r in range(n_q):
            if q == r:
                continue
            s = int(setup[q, r])
            if s > 0:
                arcs.append((q, r, s))
                starts.append(pos)
                pos += s
    return CslsModel(model=model, arcs=tuple(arcs), chain_starts=tuple(starts))


def csls_formulation_counts(model: SwitchedActuatorModel, horizon: int) -> dict:
    """Structural size of the lifted formulation per the closed forms.

    Booleans ``(n_modes + s_sigma) N``; integer equalities
    ``(1 + sum max(s-1, 0)) N`` (one-hot rows plus chain shifts);
    mixed-integer inequalities ``(2 n_modes + sum min(s, 1)) N`` (input
    gates, arrival rows, and start rows).
    """
    setup = model.graph.setup
    n_q = model.n_modes
    off = [(q, r) for q in range(n_q) for r in range(n_q) if q != r]
    s_sigma = sum(int(setup[q, r]) for q, r in off)
    chain_eq = sum(max(int(setup[q, r]) - 1, 0) for q, r in off)
    starts = sum(min(int(setup[q, r]), 1) for q, r in off)
    return {
        "booleans": (n_q + s_sigma) * horizon,
        "integer_equalities": (1 + chain_eq) * horizon,
        "setup_inequalities": (2 * n_q + starts) * horizon,
    }


@dataclass
class CslsOcpInstance:
    """Assembled lifted-mode MIQP plus its update bookkeeping.

    Rows referring to the Boolean vector one step before the horizon take
    their right-hand side from the previous applied vector; ``update``
    rewrites those entries (and the state estimate) in place.
    """

    problem: MiqpProblem
    csls: CslsModel
    horizon: int
    n_u: int
    n_x: int
    objective_offset: float
    #: (b_eq row, source index into the previous Boolean vector)
    chain_hist: list = field(default_factory=list)
    #: (h row, indices into the previous Boolean vector summed on the rhs)
    ineq_hist: list = field(default_factory=list)

    @property
    def n_bool(self) -> int:
        return self.csls.n_states

    def u_slice(self, i: int) -> slice:
        return slice(i * self.n_u, (i + 1) * self.n_u)

    def beta_slice(self, i: int) -> slice:
        o = self.horizon * self.n_u
        return slice(o + i * self.n_bool, o + (i + 1) * self.n_bool)

    def x_slice(self, i: int) -> slice:
        o = self.horizon * (self.n_u + self.n_bool)
        return slice(o + i * self.n_x, o + (i + 1) * self.n_x)

    def eps_index(self, i: int) -> int:
        return self.horizon * (self.n_u + self.n_bool) + (self.horizon + 1) * self.n_x + i

    def inputs_of(self, xvec: np.ndarray) -> np.ndarray:
        return xvec[: self.horizon * self.n_u].reshape(self.horizon, self.n_u)

    def betas_of(self, xvec: np.ndarray) -> np.ndarray:
        o = self.horizon * self.n_u
        return xvec[o: o + self.horizon * self.n_bool].reshape(self.horizon, self.n_bool)

    def states_of(self, xvec: np.ndarray) -> np.ndarray:
        o = self.horizon * (self.n_u + self.n_bool)
        return xvec[o: o + (self.horizon + 1) * self.n_x].reshape(self.horizon + 1, self.n_x)

    def ocp_objective(self, xvec: np.ndarray) -> float:
        return self.problem.objective(xvec) + self.objective_offset

    def plan_vector(self, x_hat, u_traj, b_traj, x_bar) -> np.ndarray:
        """Assemble a full decision vector from an input/Boolean plan."""
        n = self.horizon
        model = self.csls.model
        u_traj = np.asarray(u_traj, dtype=float)
        vec = np.zeros(self.problem.n_var)
        vec[: n * self.n_u] = u_traj.ravel()
        vec[self.beta_slice(0).start: self.beta_slice(n - 1).stop] = \
            np.asarray(b_traj, dtype=float).ravel()
        x_i = np.asarray(x_hat, dtype=float).ravel()
        for i in range(n + 1):
            vec[self.x_slice(i)] = x_i
            if x_bar is not None:
                vec[self.eps_index(i)] = max(0.0, float(np.max(x_i - x_bar)))
            if i < n:
                x_i = model.a @ x_i + model.b @ u_traj[i]
        return vec

    def update(self, x_hat: np.ndarray, history) -> None:
        """Point the instance at a new state estimate and Boolean history.

        ``history`` holds previously applied Boolean vectors in
        chronological order; only the last one enters the constraints.  An
        empty history (free start) forces the first step onto an
        operational entry: chain entries are pinned to zero and the
        arrival/start rows are vacuous.
        """
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        if x_hat.size != self.n_x:
            raise ValueError(f"state estimate has size {x_hat.size}, expected {self.n_x}")
        self.problem.b_eq[: self.n_x] = x_hat
        _apply_beta_history(self.problem, self.csls, self.beta_slice(0),
                            self.chain_hist, self.ineq_hist, history)


def _apply_beta_history(problem: MiqpProblem, csls: CslsModel, b0: slice,
                        chain_hist, ineq_hist, history) -> None:
    """Rewrite the rows whose right-hand side reads the previous Boolean
    vector; an empty history pins step 0 onto an operational entry."""
    prev = np.asarray(history[-1], dtype=float).ravel() if len(history) else None
    if prev is None:
        problem.ub[b0.start + csls.n_modes: b0.stop] = 0.0
        for row, _src in chain_hist:
            problem.b_eq[row] = 0.0
        for row, _idx in ineq_hist:
            problem.h[row] = 1.0
        return
    if prev.size != csls.n_states:
        raise ValueError(f"history vector has size {prev.size}, "
                         f"expected {csls.n_states}")
    problem.ub[b0.start + csls.n_modes: b0.stop] = 1.0
    for row, src in chain_hist:
        problem.b_eq[row] = prev[src]
    for row, idx in ineq_hist:
        problem.h[row] = float(prev[list(idx)].sum())


def _lifted_boolean_rows(csls: CslsModel, n: int, n_var: int, o_d: int,
                         eq_row0: int, ineq_row0: int):
    """Boolean rows shared by the sparse and condensed builders.

    One-hot sums; chain-shift equalities tying stage ``j`` at step ``i`` to
    stage ``j-1`` at step ``i-1``; per-mode input gates summing each mode's
    channels against the cap times its operational entry; arrival
    inequalities allowing an operational entry only after staying, a
    zero-setup hop, or a completed chain; and start inequalities allowing a
    chain to begin only from (or upon arrival at) its source mode.  Rows
    referring to the step before the horizon are recorded against the
    absolute row numbers anchored at ``eq_row0``/``ineq_row0``.
    """
    model = csls.model
    n_u, n_q, n_b = model.n_u, csls.n_modes, csls.n_states
    cap = float(model.sum_bound)
    j_u = input_sum_matrix(model)

    def bcol(i: int, idx: int) -> int:
        return o_d + i * n_b + idx

    onehot = sp.lil_matrix((n, n_var))
    for i in range(n):
        onehot[i, o_d + i * n_b: o_d + (i + 1) * n_b] = 1.0

    chain_hist = []
    chain_rows = []
    row_no = eq_row0
    for i in range(n):
        for j, (q, r, s) in enumerate(csls.arcs):
            for stage in range(2, s + 1):
                row = sp.lil_matrix((1, n_var))
                row[0, bcol(i, csls.stage_index(j, stage))] = 1.0
                if i >= 1:
                    row[0, bcol(i - 1, csls.stage_index(j, stage - 1))] = -1.0
                else:
                    chain_hist.append((row_no, csls.stage_index(j, stage - 1)))
                chain_rows.append(row.tocsr())
                row_no += 1

    g_parts: list = []
    h_parts: list = []
    ineq_row = ineq_row0
    ineq_hist = []
    for i in range(n):
        for q in range(n_q):
            row = sp.lil_matrix((1, n_var))
            for c in np.flatnonzero(j_u[q]):
                row[0, i * n_u + c] = 1.0
            row[0, bcol(i, q)] = -cap
            g_parts.append(row.tocsr())
            h_parts.append(np.zeros(1))
            ineq_row += 1
    for i in range(n):
        for q in range(n_q):
            row = sp.lil_matrix((1, n_var))
            row[0, bcol(i, q)] = 1.0
            prev_idx = [q] + csls.zero_setup_sources(q) + \
                [csls.stage_index(j, csls.arcs[j][2]) for j in csls.arcs_into(q)]
            if i >= 1:
                for idx in prev_idx:
                    row[0, bcol(i - 1, idx)] = -1.0
            else:
                ineq_hist.append((ineq_row, tuple(prev_idx)))
            g_parts.append(row.tocsr())
            h_parts.append(np.zeros(1))
            ineq_row += 1
    for i in range(n):
        for j, (q, r, s) in enumerate(csls.arcs):
            row = sp.lil_matrix((1, n_var))
            row[0, bcol(i, csls.stage_index(j, 1))] = 1.0
            prev_idx = [q] + \
                [csls.stage_index(a, csls.arcs[a][2]) for a in csls.arcs_into(q)]
            if i >= 1:
                for idx in prev_idx:
                    row[0, bcol(i - 1, idx)] = -1.0
            else:
                ineq_hist.append((ineq_row, tuple(prev_idx)))
            g_parts.append(row.tocsr())
            h_parts.append(np.zeros(1))
            ineq_row += 1
    return onehot.tocsr(), chain_rows, chain_hist, g_parts, h_parts, ineq_hist


def build_csls_ocp(csls: CslsModel, cfg: MpcConfig, x_hat,
                   history=()) -> CslsOcpInstance:
    """Assemble the horizon-``N`` tracking MIQP over the lifted Booleans.

    Continuous blocks are shared with the compact builder; the Boolean
    polytope comes from :func:`_lifted_boolean_rows`.
    """
    model = csls.model
    if not model.one_sided or model.sum_bound is None:
        raise NotImplementedError(
            "the summed gate form needs one-sided inputs and a total input cap")
    n = cfg.horizon
    n_u, n_x = model.n_u, model.n_x
    n_b = csls.n_states

    parts = continuous_parts(model, cfg, n_b)
    n_var, o_d = parts.n_var, parts.o_d
    soft_rows = sum(m.shape[0] for m in parts.g_parts)

    onehot, chain_rows, chain_hist, bool_g, bool_h, ineq_hist = \
        _lifted_boolean_rows(csls, n, n_var, o_d,
                             parts.b_eq_core.size + n, soft_rows)

    # equalities: [ continuous | one-hot sums | chain shifts ]
    a_eq = sp.vstack(list(parts.eq_rows) + [onehot] + chain_rows, format="csr")
    b_eq = np.concatenate([parts.b_eq_core, np.ones(n),
                           np.zeros(len(chain_rows))])
    # inequalities: [ soft bounds | input gates | arrival | start ]
    g = sp.vstack(list(parts.g_parts) + bool_g, format="csr")
    h = np.concatenate(list(parts.h_parts) + bool_h)
    bool_idx = np.arange(o_d, o_d + n * n_b, dtype=np.int64)

    problem = MiqpProblem(p=parts.p, q=parts.q_vec, a_eq=a_eq, b_eq=b_eq,
                          g=g, h=h, lb=parts.lb, ub=parts.ub, bool_idx=bool_idx)
    problem.validate()
    inst = CslsOcpInstance(problem=problem, csls=csls, horizon=n, n_u=n_u,
                           n_x=n_x, objective_offset=parts.offset,
                           chain_hist=chain_hist, ineq_hist=ineq_hist)
    inst.update(x_hat, list(history))
    return inst


@dataclass
class CondensedCslsOcpInstance:
    """Lifted-mode MIQP with the predicted states eliminated.

    Same decision layout idea as the compact condensed form: ``[u | beta |
    eps]`` with the tracking cost and soft state bound expressed through
    the input-response operators, so each sample's refresh is a handful of
    matrix-vector products instead of a rebuild.
    """

    problem: MiqpProblem
    csls: CslsModel
    horizon: int
    n_u: int
    n_x: int
    objective_offset: float
    chain_hist: list
    ineq_hist: list
    a_mat: sp.csr_matrix
    gamma: np.ndarray
    h_mat: np.ndarray
    q_w: np.ndarray
    ref: np.ndarray
    x_bar: np.ndarray | None

    @property
    def n_bool(self) -> int:
        return self.csls.n_states

    def u_slice(self, i: int) -> slice:
        return slice(i * self.n_u, (i + 1) * self.n_u)

    def beta_slice(self, i: int) -> slice:
        o = self.horizon * self.n_u
        return slice(o + i * self.n_bool, o + (i + 1) * self.n_bool)

    def eps_index(self, i: int) -> int:
        return self.horizon * (self.n_u + self.n_bool) + i

    def inputs_of(self, xvec: np.ndarray) -> np.ndarray:
        return xvec[: self.horizon * self.n_u].reshape(self.horizon, self.n_u)

    def betas_of(self, xvec: np.ndarray) -> np.ndarray:
        o = self.horizon * self.n_u
        return xvec[o: o + self.horizon * self.n_bool].reshape(self.horizon, self.n_bool)

    def ocp_objective(self, xvec: np.ndarray) -> float:
        return self.problem.objective(xvec) + self.objective_offset

    def plan_vector(self, x_hat, u_traj, b_traj, x_bar) -> np.ndarray:
        """Assemble a full decision vector from an input/Boolean plan."""
        n = self.horizon
        model = self.csls.model
        u_traj = np.asarray(u_traj, dtype=float)
        vec = np.zeros(self.problem.n_var)
        vec[: n * self.n_u] = u_traj.ravel()
        vec[self.beta_slice(0).start: self.beta_slice(n - 1).stop] = \
            np.asarray(b_traj, dtype=float).ravel()
        x_i = np.asarray(x_hat, dtype=float).ravel()
        for i in range(n + 1):
            if x_bar is not None:
                vec[self.eps_index(i)] = max(0.0, float(np.max(x_i - x_bar)))
            if i < n:
                x_i = model.a @ x_i + model.b @ u_traj[i]
        return vec

    def update(self, x_hat: np.ndarray, history) -> None:
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        if x_hat.size != self.n_x:
            raise ValueError(f"state estimate has size {x_hat.size}, expected {self.n_x}")
        self.objective_offset = condensed_tracking_update(
            self.problem, x_hat, self.horizon, self.n_u, self.a_mat,
            self.gamma, self.h_mat, self.q_w, self.ref, self.x_bar)
        _apply_beta_history(self.problem, self.csls, self.beta_slice(0),
                            self.chain_hist, self.ineq_hist, history)


def build_condensed_csls_ocp(csls: CslsModel, cfg: MpcConfig, x_hat,
                             history=()) -> CondensedCslsOcpInstance:
    """Assemble the state-eliminated form of :func:`build_csls_ocp`.

    The continuous blocks come from the same operators as the compact
    condensed builder and the Boolean polytope from the same rows as the
    sparse lifted builder, so both pairs of forms yield the same optimizer
    and objective (up to solver tolerance).
    """
    model = csls.model
    if not model.one_sided or model.sum_bound is None:
        raise NotImplementedError(
            "the summed gate form needs one-sided inputs and a total input cap")
    n = cfg.horizon
    n_u, n_x = model.n_u, model.n_x
    n_b = csls.n_states

    core = condensed_core(model, cfg, n_b)
    n_var, o_d = core.n_var, core.o_d
    soft_rows = sum(m.shape[0] for m in core.g_soft)

    onehot, chain_rows, chain_hist, bool_g, bool_h, ineq_hist = \
        _lifted_boolean_rows(csls, n, n_var, o_d, n, soft_rows)

    # equalities: [ one-hot sums | chain shifts ]
    a_eq = sp.vstack([onehot] + chain_rows, format="csr")
    b_eq = np.concatenate([np.ones(n), np.zeros(len(chain_rows))])
    # inequalities: [ soft bounds | input gates | arrival | start ]
    g = sp.vstack(core.g_soft + bool_g, format="csr")
    h = np.concatenate(core.h_soft + bool_h)
    bool_idx = np.arange(o_d, o_d + n * n_b, dtype=np.int64)

    problem = MiqpProblem(p=core.p, q=core.q_core, a_eq=a_eq, b_eq=b_eq,
                          g=g, h=h, lb=core.lb, ub=core.ub, bool_idx=bool_idx)
    problem.validate()
    inst = CondensedCslsOcpInstance(
        problem=problem, csls=csls, horizon=n, n_u=n_u, n_x=n_x,
        objective_offset=0.0, chain_hist=chain_hist, ineq_hist=ineq_hist,
        a_mat=core.a_mat, gamma=core.gamma, h_mat=cfg.h, q_w=cfg.q_weight,
        ref=cfg.reference, x_bar=cfg.state_bound(n_x))
    inst.update(x_hat, list(history))
    return inst


def delta_to_beta(csls: CslsModel, deltas, initial_mode: int | None = None
                  ) -> np.ndarray:
    """Map a destination-mode sequence to its lifted Boolean trajectory.

    The automaton is deterministic: a destination change from ``q`` to ``r``
    with setup ``s > 0`` enters the chain at stage 1 and walks it one stage
    per sample; every other sample is the destination's operational entry.
    ``initial_mode=None`` starts from rest (the first destination is taken
    as already reached).
    """
    deltas = np.asarray(deltas)
    out = np.zeros((deltas.shape[0], csls.n_states), dtype=np.int64)
    setup = csls.model.graph.setup
    arc_of = {(q, r): j for j, (q, r, _) in enumerate(csls.arcs)}
    mode = initial_mode
    remaining = 0
    arc = -1
    stage = 0
    for k in range(deltas.shape[0]):
        dest = int(np.argmax(deltas[k]))
        if mode is None:
            mode = dest
        if remaining > 0 and dest == csls.arcs[arc][1]:
            stage += 1
            remaining -= 1
            out[k, csls.stage_index(arc, stage)] = 1
            if remaining == 0:
                mode = dest
            continue
        if dest != mode:
            s = int(setup[mode, dest])
            if s > 0:
                arc = arc_of[(mode, dest)]
                stage = 1
                remaining = s - 1
                out[k, csls.stage_index(arc, stage)] = 1
                if remaining == 0:
                    mode = dest
                continue
            mode = dest
        remaining = 0
        out[k, mode] = 1
    return out


class CslsController:
    """Receding-horizon loop over the lifted encoding.

    Mirrors the compact controller sample for sample: identical skip logic
    while a switch is under way, identical safe hold on solver failure, and
    the same warm-start shift (chains advance one stage per sample).  The
    applied Boolean vector is recorded as the history the next instance
    update consumes.
    """

    def __init__(self, model: SwitchedActuatorModel, cfg: MpcConfig,
                 initial_mode: int | None = None):
        if initial_mode is not None and not 0 <= initial_mode < model.n_modes:
            raise ValueError(f"initial mode {initial_mode} out of range")
        self.model = model
        self.cfg = cfg
        self.csls = build_csls(model)
        builder = build_condensed_csls_ocp if cfg.condense else build_csls_ocp
        self.instance = builder(self.csls, cfg, np.zeros(model.n_x), [])
        self.k = 0
        self.k_t = 0
        self.s_t = 0
        self.solves = 0
        self._destination: int | None = None if initial_mode is None else int(initial_mode)
        self._history: deque = deque(maxlen=1)
        if initial_mode is not None:
            self._history.append(self.csls.operational_one_hot(int(initial_mode)))
        self._prev_plan: tuple[int, np.ndarray, np.ndarray] | None = None
        self._committed: np.ndarray | None = None
        self._commit_k = 0
        self._x_bar = cfg.state_bound(model.n_x)

    @property
    def destination(self) -> int | None:
        return self._destination

    def history(self) -> list[np.ndarray]:
        return list(self._history)

    def _mode_one_hot(self, mode: int) -> np.ndarray:
        v = np.zeros(self.model.n_modes, dtype=np.int64)
        v[mode] = 1
        return v

    def _slack_now(self, x_hat: np.ndarray) -> float:
        if self._x_bar is None:
            return 0.0
        return float(max(0.0, np.max(x_hat - self._x_bar)))

    def _shift_candidate(self, x_hat: np.ndarray) -> np.ndarray | None:
        if self._prev_plan is None:
            return None
        k_prev, u_prev, b_prev = self._prev_plan
        shift = self.k - k_prev
        n = self.cfg.horizon
        if shift <= 0 or shift >= n:
            return None
        u_c = np.vstack([u_prev[shift:], np.zeros((shift, self.model.n_u))])
        tail = [b_prev[-1]]
        for _ in range(shift):
            tail.append(self.csls.advance(tail[-1]))
        b_c = np.vstack([b_prev[shift:], np.array(tail[1:], dtype=np.int64)])
        return self.instance.plan_vector(x_hat, u_c, b_c, self._x_bar)

    def _round_betas(self, b_traj: np.ndarray) -> np.ndarray:
        r = np.round(b_traj).astype(np.int64)
        if np.max(np.abs(b_traj - r)) > 1e-4 or np.any(r.sum(axis=1) != 1) or r.min() < 0:
            raise SolverFailedError("solver returned a non-integral Boolean block")
        return r

    def step(self, x_hat) -> StepResult:
        x_hat = np.asarray(x_hat, dtype=float).ravel()
        slack = self._slack_now(x_hat)
        if self.k_t >= self.s_t:
            result, beta = self._solve_step(x_hat, slack)
        else:
            off = self.k - self._commit_k
            if self._committed is not None and off < self._committed.shape[0]:
                beta = self._committed[off].copy()
            else:
                beta = self.csls.operational_one_hot(self._destination)
            result = StepResult(delta=self._mode_one_hot(self._destination),
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
        self._history.append(beta)
        self.k += 1
        self.k_t += 1
        return result

    def _solve_step(self, x_hat: np.ndarray, slack: float) -> tuple[StepResult, np.ndarray]:
        inst = self.instance
        inst.update(x_hat, self.history())
        hint = self._shift_candidate(x_hat) if self.cfg.warm_start else None
        hold_dest = 0 if self._destination is None else self._destination
        hold_beta = self.csls.operational_one_hot(hold_dest)
        hold = StepResult(delta=self._mode_one_hot(hold_dest),
                          u=np.zeros(self.model.n_u),
                          destination=hold_dest, solved=True,
                          safe_hold=True, objective=None, slack=slack, stats=None)
        try:
            sol = solve_miqp(inst.problem, gap=self.cfg.gap,
                             node_limit=self.cfg.node_limit, incumbent=hint)
        except NumericalBreakdownError:
            return hold, hold_beta
        self.solves += 1
        if not sol.ok or sol.x is None:
            hold.stats = sol
            return hold, hold_beta
        u_traj = inst.inputs_of(sol.x)
        try:
            b_traj = self._round_betas(inst.betas_of(sol.x))
        except SolverFailedError:
            hold.stats = sol
            return hold, hold_beta
        self._prev_plan = (self.k, u_traj, b_traj)
        self._committed = b_traj
        self._commit_k = self.k
        beta0 = b_traj[0]
        dest = self.csls.destination_of(beta0)
        result = StepResult(delta=self._mode_one_hot(dest),
                            u=u_traj[0].copy(),
                            destination=dest,
                            solved=True, safe_hold=False,
                            objective=inst.ocp_objective(sol.x),
                            slack=slack, stats=sol)
        return result, beta0.copy()


@dataclass
class FormulationComparison:
    """Paired closed-loop run of the two encodings under one noise seed."""

    steps: int
    seed: int
    counts_compact: dict
    counts_lifted: dict
    objective_compact: list
    objective_lifted: list
    nodes_compact: list
    nodes_lifted: list
    qp_compact: list
    qp_lifted: list
    input_max_diff: list
    solved_compact: list
    solved_lifted: list

    @property
    def objective_diffs(self) -> list:
        out = []
        for a, b in zip(self.objective_compact, self.objective_lifted):
            out.append(abs(a - b) if a is not None and b is not None else None)
        return out

    @property
    def total_qp_compact(self) -> int:
        return int(sum(self.qp_compact))

    @property
    def total_qp_lifted(self) -> int:
        return int(sum(self.qp_lifted))

    def node_advantage_fraction(self) -> float:
        """Fraction of solved steps where the compact tree is no larger."""
        pairs = [(a, b) for a, b, sa, sb in zip(
            self.nodes_compact, self.nodes_lifted,
            self.solved_compact, self.solved_lifted) if sa and sb]
        if not pairs:
            return 1.0
        return sum(1 for a, b in pairs if a <= b) / len(pairs)

    def rows(self):
        hdr = ["step", "objective_compact", "objective_lifted", "objective_diff",
               "nodes_compact", "nodes_lifted", "qp_compact", "qp_lifted",
               "input_max_diff", "solved_compact", "solved_lifted"]
        yield hdr
        diffs = self.objective_diffs
        for k in range(self.steps):
            def fnum(v):
                return "" if v is None else f"{v:.10g}"
            yield [str(k), fnum(self.objective_compact[k]),
                   fnum(self.objective_lifted[k]), fnum(diffs[k]),
                   str(self.nodes_compact[k]), str(self.nodes_lifted[k]),
                   str(self.qp_compact[k]), str(self.qp_lifted[k]),
                   f"{self.input_max_diff[k]:.10g}",
                   str(int(self.solved_compact[k])),
                   str(int(self.solved_lifted[k]))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            for row in self.rows():
                fh.write(",".join(row) + "\n")

    def summary(self) -> str:
        diffs = [d for d in self.objective_diffs if d is not None]
        cc, cl = self.counts_compact, self.counts_lifted
        lines = [
            f"paired closed-loop comparison over {self.steps} steps (seed {self.seed})",
            "",
            "formulation size per horizon:",
            f"  booleans              {cc['booleans']:6d} compact | {cl['booleans']:6d} lifted",
            f"  integer equalities    {cc['integer_equalities']:6d} compact | "
            f"{cl['integer_equalities']:6d} lifted",
            f"  gate inequalities     {cc['setup_inequalities']:6d} compact "
            f"({cc['setup_inequalities_pruned']} pruned) | "
            f"{cl['setup_inequalities']:6d} lifted",
            "",
            f"max per-step objective difference: "
            f"{max(diffs) if diffs else 0.0:.3e}",
            f"max per-step applied-input difference: "
            f"{max(self.input_max_diff) if self.input_max_diff else 0.0:.3e}",
            f"relaxation solves: {self.total_qp_compact} compact, "
            f"{self.total_qp_lifted} lifted",
            f"compact tree no larger on "
            f"{100.0 * self.node_advantage_fraction():.1f}% of solved steps",
        ]
        return "\n".join(lines)


def compare_formulations(thermal_model, cfg: MpcConfig, steps: int, seed: int,
                         initial_mode: int | None = 0,
                         observer=None) -> FormulationComparison:
    """Run both controllers closed-loop on the same plant noise and pair
    their per-step statistics.

    Each controller drives its own copy of the simulation with an
    identically seeded generator, so any divergence is attributable to the
    Boolean encoding (and should stay within solver tolerances).
    """
    from .mpc import Controller, formulation_counts
    from .thermal import ObserverConfig, observer_update, simulate_step

    model = thermal_model.to_switched_model()
    obs = observer if observer is not None else ObserverConfig()

    def run(ctl):
        rng = np.random.default_rng(seed)
        x = np.zeros(thermal_model.n_x)
        x_hat = np.zeros(thermal_model.n_x)
        recs = []
        for _ in range(steps):
            res = ctl.step(x_hat)
            x, y = simulate_step(thermal_model, x, res.u, res.switching, rng,
                                 obs.noise_std)
            x_hat = observer_update(thermal_model, obs, x_hat, res.u, y)
            recs.append(res)
        return recs

    rec_a = run(Controller(model, cfg, initial_mode=initial_mode))
    rec_b = run(CslsController(model, cfg, initial_mode=initial_mode))
    return FormulationComparison(
        steps=steps, seed=seed,
        counts_compact=formulation_counts(model, cfg.horizon),
        counts_lifted=csls_formulation_counts(model, cfg.horizon),
        objective_compact=[r.objective for r in rec_a],
        objective_lifted=[r.objective for r in rec_b],
        nodes_compact=[r.nodes for r in rec_a],
        nodes_lifted=[r.nodes for r in rec_b],
        qp_compact=[r.qp_solves for r in rec_a],
        qp_lifted=[r.qp_solves for r in rec_b],
        input_max_diff=[float(np.max(np.abs(a.u - b.u)))
                        for a, b in zip(rec_a, rec_b)],
        solved_compact=[r.solved and not r.safe_hold for r in rec_a],
        solved_lifted=[r.solved and not r.safe_hold for r in rec_b],
    )
