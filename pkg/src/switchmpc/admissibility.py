"""Admissibility and feasibility calculus for switching trajectories.

Three levels of description are connected here:

* actuator sequences — explicit Operational / Switching states per sample;
* activator sequences — one-hot destination-mode vectors (the integer
  variables of the optimization formulations), which deliberately lump
  "operating in q" and "switching toward q" together;
* input sequences — per-sample input vectors whose nonzero pattern must
  respect the actuator state.

An activator/input pair is *feasible* when, at every sample with a nonzero
input, the activator points at the driven mode and the activator history
proves any required switch had time to complete.  Every admissible pair is
feasible; conversely a feasible pair can always be repaired into an
admissible one with the same inputs, minimum switch count, and earliest
switch times (``assure_admissibility``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .digraph import SetupDigraph
from .errors import NonDistinctWeightsError, NotFeasibleError
from .model import (
    ActuatorState,
    Operational,
    Switching,
    SwitchedActuatorModel,
    post_mode,
)


@dataclass(frozen=True)
class AdmissibilityCheck:
    """Outcome of an admissibility test with the first violation, if any.

    ``condition`` is "A" for a bad initial state and "B" for a switch-rule
    violation at ``index``.
    """

    ok: bool
    index: int | None = None
    condition: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def _check_states(states, n_modes: int) -> None:
    if len(states) == 0:
        raise ValueError("actuator sequence must be nonempty")
    for k, st in enumerate(states):
        if isinstance(st, Operational):
            modes = (st.mode,)
        elif isinstance(st, Switching):
            modes = (st.origin, st.dest)
        else:
            raise TypeError(f"entry {k} is not an actuator state: {st!r}")
        for q in modes:
            if not 0 <= q < n_modes:
                raise ValueError(f"entry {k} references mode {q}, valid range is "
                                 f"0..{n_modes - 1}")


def is_admissible_actuator(states, graph: SetupDigraph) -> AdmissibilityCheck:
    """Check that an actuator sequence obeys the switching rules.

    The sequence must start operational, and every started switch (q, r)
    must occupy exactly ``setup[q, r]`` consecutive Switching entries and
    then land in the post-set of the switch (operate in r, start a new timed
    switch out of r, or jump through a zero-setup arc).  A switch truncated
    by the end of the sequence is allowed.
    """
    _check_states(states, graph.n_modes)
    setup = graph.setup
    if not isinstance(states[0], Operational):
        return AdmissibilityCheck(False, 0, "A")
    remaining = 0  # samples the in-progress switch still occupies after the current index
    for k in range(1, len(states)):
        prev, cur = states[k - 1], states[k]
        if remaining > 0:
            if cur != prev:
                return AdmissibilityCheck(False, k, "B")
            remaining -= 1
            continue
        # prev is operational, or a switch that completed at index k-1
        q = post_mode(prev)
        if isinstance(cur, Operational):
            if cur.mode != q and setup[q, cur.mode] != 0:
                return AdmissibilityCheck(False, k, "B")
        else:
            if cur.origin != q or setup[cur.origin, cur.dest] == 0:
                return AdmissibilityCheck(False, k, "B")
            remaining = int(setup[cur.origin, cur.dest]) - 1
    return AdmissibilityCheck(True)


def _resolve_zero_tol(model: SwitchedActuatorModel, zero_tol: float | None) -> float:
    return model.input_zero_tol() if zero_tol is None else float(zero_tol)


def nonzero_modes(u_k: np.ndarray, model: SwitchedActuatorModel, zero_tol: float) -> list[int]:
    """Modes whose input block has any channel above ``zero_tol`` in magnitude."""
    out = []
    for q in range(model.n_modes):
        blk = u_k[model.mode_slice(q)]
        if blk.size and np.max(np.abs(blk)) > zero_tol:
            out.append(q)
    return out


def is_admissible_pair(states, u, model: SwitchedActuatorModel,
                       zero_tol: float | None = None) -> bool:
    """Check an actuator sequence together with its input sequence.

    True when the actuator sequence is admissible and, at every sample, all
    channels outside the operating mode's block are zero (all channels, when
    switching).
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if len(states) != u.shape[0]:
        raise ValueError(f"{len(states)} states but {u.shape[0]} input samples")
    if u.shape[1] != model.n_u:
        raise ValueError(f"input width {u.shape[1]} does not match n_u={model.n_u}")
    if not is_admissible_actuator(states, model.graph):
        return False
    tol = _resolve_zero_tol(model, zero_tol)
    for k, st in enumerate(states):
        active = nonzero_modes(u[k], model, tol)
        if isinstance(st, Switching):
            if active:
                return False
        elif any(q != st.mode for q in active):
            return False
    return True


def _activator_modes(activators: np.ndarray) -> np.ndarray:
    """Mode index per row of a one-hot activator array (validates one-hotness)."""
    activators = np.atleast_2d(np.asarray(activators))
    if not np.all((activators == 0) | (activators == 1)):
        raise ValueError("activators must be 0/1 vectors")
    if not np.all(activators.sum(axis=1) == 1):
        k = int(np.flatnonzero(activators.sum(axis=1) != 1)[0])
        raise ValueError(f"activator at index {k} is not one-hot")
    return np.argmax(activators, axis=1)


def is_feasible_pair(activators, u, model: SwitchedActuatorModel,
                     history=None, zero_tol: float | None = None) -> bool:
    """Check the switching feasibility of an activator/input pair.

    For every sample k with a nonzero input the driven mode q must satisfy:
    the activator at k points at q, and for each lag tau = 1..min(k+H, s_q)
    (H past activators supplied via ``history``, s_q the largest setup time
    into q) the activator at k - tau points at a mode from which the switch
    to q takes fewer than tau samples.  Samples with zero input place no
    restriction beyond one-hotness.
    """
    activators = np.atleast_2d(np.asarray(activators))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if activators.shape[0] != u.shape[0]:
        raise ValueError(f"{activators.shape[0]} activators but {u.shape[0]} input samples")
    if activators.shape[1] != model.n_modes:
        raise ValueError(f"activator width {activators.shape[1]} != n_modes={model.n_modes}")
    if u.shape[1] != model.n_u:
        raise ValueError(f"input width {u.shape[1]} does not match n_u={model.n_u}")
    modes = _activator_modes(activators)
    hist_modes = np.empty(0, dtype=np.int64)
    if history is not None and len(history) > 0:
        hist_modes = _activator_modes(np.asarray(history))
    tol = _resolve_zero_tol(model, zero_tol)
    setup = model.graph.setup
    n_hist = hist_modes.size

    def mode_at(j: int) -> int:
        return int(modes[j]) if j >= 0 else int(hist_modes[n_hist + j])

    for k in range(u.shape[0]):
        active = nonzero_modes(u[k], model, tol)
        if not active:
            continue
        if len(active) > 1:
            return False
        q = active[0]
        if modes[k] != q:
            return False
        tau_max = min(k + n_hist, model.graph.max_setup_into(q))
        for tau in range(1, tau_max + 1):
            if setup[mode_at(k - tau), q] >= tau:
                return False
    return True


def _one_hot_rows(modes, n_modes: int) -> np.ndarray:
    out = np.zeros((len(modes), n_modes), dtype=np.int64)
    out[np.arange(len(modes)), list(modes)] = 1
    return out


def assure_admissibility(activators, u, model: SwitchedActuatorModel,
                         initial_mode: int | None = None, history=None,
                         zero_tol: float | None = None) -> np.ndarray:
    """Repair a feasible activator sequence into an admissible one.

    The returned sequence keeps the inputs untouched: it holds the activator
    of the next nonzero-input sample over every preceding gap (and the last
    used activator afterwards).  Among all admissible sequences compatible
    with ``u`` it attains the minimum number of switches, with every switch
    started as early as possible.

    With an all-zero input the constant sequence at ``initial_mode`` (or at
    the first given activator when no initial mode is supplied) is returned.

    Raises
    ------
    NotFeasibleError
        If the given pair fails :func:`is_feasible_pair`.
    """
    activators = np.atleast_2d(np.asarray(activators))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if not is_feasible_pair(activators, u, model, history=history, zero_tol=zero_tol):
        raise NotFeasibleError("activator/input pair violates the switching conditions")
    tol = _resolve_zero_tol(model, zero_tol)
    horizon = u.shape[0]
    used = [k for k in range(horizon) if nonzero_modes(u[k], model, tol)]
    if not used:
        q0 = int(np.argmax(activators[0])) if initial_mode is None else int(initial_mode)
        return _one_hot_rows([q0] * horizon, model.n_modes)
    modes = _activator_modes(activators)
    out = np.empty(horizon, dtype=np.int64)
    prev = 0
    for k_use in used:
        out[prev:k_use + 1] = modes[k_use]
        prev = k_use + 1
    out[prev:] = modes[used[-1]]
    return _one_hot_rows(out, model.n_modes)


def reconstruct_actuator_sequence(activators, u, model: SwitchedActuatorModel,
                                  zero_tol: float | None = None) -> list[ActuatorState]:
    """Explicit actuator states realizing an assured activator sequence.

    Intended for sequences produced by :func:`assure_admissibility` (constant
    segments whose changes all fit their setup times): each activator change
    q -> r is realized as a switch starting immediately and occupying
    ``setup[q, r]`` samples.
    """
    activators = np.atleast_2d(np.asarray(activators))
    modes = _activator_modes(activators)
    setup = model.graph.setup
    states: list[ActuatorState] = [Operational(int(modes[0]))]
    k = 1
    while k < len(modes):
        q_prev = post_mode(states[-1])
        q = int(modes[k])
        if q == q_prev:
            states.append(Operational(q))
            k += 1
            continue
        dur = int(setup[q_prev, q])
        for _ in range(min(dur, len(modes) - k)):
            states.append(Switching(q_prev, q))
            k += 1
        if k < len(modes):
            states.append(Operational(q))
            k += 1
    return states


def min_switch_reconstruct(activators, u, weights, model: SwitchedActuatorModel,
                           initial_mode: int | None = None, history=None,
                           zero_tol: float | None = None) -> np.ndarray:
    """Weighted minimum-switch activator reconstruction for fixed inputs.

    Minimizes ``sum_k weights[k] * ||act[k+1] - act[k]||^2`` over all
    activator sequences feasible with ``u`` (exact dynamic program over the
    recent-mode window).  All weights must be positive and pairwise distinct —
    the standing uniqueness condition; strictly increasing weights reproduce
    :func:`assure_admissibility`, strictly decreasing weights place every
    switch as late as possible.

    Raises
    ------
    NonDistinctWeightsError, NotFeasibleError
    """
    activators = np.atleast_2d(np.asarray(activators))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    horizon = u.shape[0]
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (horizon - 1,):
        raise ValueError(f"expected {horizon - 1} weights for {horizon} samples, "
                         f"got {weights.shape}")
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    if len(np.unique(weights)) != weights.size:
        raise NonDistinctWeightsError("switch-cost weights must be pairwise distinct")
    if not is_feasible_pair(activators, u, model, history=history, zero_tol=zero_tol):
        raise NotFeasibleError("activator/input pair violates the switching conditions")

    tol = _resolve_zero_tol(model, zero_tol)
    n_modes = model.n_modes
    setup = model.graph.setup
    s_bar = model.graph.max_setup
    required: list[int | None] = []
    for k in range(horizon):
        active = nonzero_modes(u[k], model, tol)
        required.append(active[0] if active else None)
    if all(r is None for r in required):
        q0 = int(np.argmax(activators[0])) if initial_mode is None else int(initial_mode)
        return _one_hot_rows([q0] * horizon, n_modes)

    hist_modes: tuple[int | None, ...] = ()
    if history is not None and len(history) > 0:
        hist_modes = tuple(int(m) for m in _activator_modes(np.asarray(history)))
    # window state: the last s_bar modes (older entries first); None marks
    # "before time zero", which never blocks a switch condition.
    pad: tuple[int | None, ...] = (None,) * max(0, s_bar - len(hist_modes))
    init_window = (pad + hist_modes)[-s_bar:] if s_bar else ()

    def allowed(k: int, window, q: int) -> bool:
        if required[k] is not None and required[k] != q:
            return False
        if required[k] is None:
            return True
        for tau in range(1, min(len(window), model.graph.max_setup_into(q)) + 1):
            m = window[-tau]
            if m is not None and setup[m, q] >= tau:
                return False
        return True

    # frontier: window tuple -> (cost, mode path)
    frontier: dict[tuple, tuple[float, tuple[int, ...]]] = {}
    for q in range(n_modes):
        if allowed(0, init_window, q):
            w = (init_window + (q,))[-s_bar:] if s_bar else ()
            cand = (0.0, (q,))
            if w not in frontier or cand < frontier[w]:
                frontier[w] = cand
    for k in range(1, horizon):
        nxt: dict[tuple, tuple[float, tuple[int, ...]]] = {}
        for window, (cost, path) in frontier.items():
            for q in range(n_modes):
                if not allowed(k, window, q):
                    continue
                step = 2.0 * weights[k - 1] if q != path[-1] else 0.0
                w = (window + (q,))[-s_bar:] if s_bar else ()
                cand = (cost + step, path + (q,))
                if w not in nxt or cand < nxt[w]:
                    nxt[w] = cand
        frontier = nxt
        if not frontier:
            raise NotFeasibleError("no activator sequence is compatible with the inputs")
    best = min(frontier.values())
    return _one_hot_rows(best[1], n_modes)
