"""Mixed-integer linear constraint blocks gating inputs by activator history.

Each block couples the input at a sample with the activator ``tau`` samples
earlier: ``coef_u @ u_k + coef_act @ act_{k-tau} <= rhs``.  Blocks carry a
symbolic lag rather than absolute time indices, so the same block serves
every sample of a horizon.  Two families are generated:

* the general two-sided form: per-channel bounds opened and closed by the
  activator (and its history through the per-lag gate matrices);
* the one-sided summed form for nonnegative inputs: per-mode input sums
  capped by the activator history, optionally with a single uniform cap.

Rows whose gate-matrix column is all ones are implied by the plain input
bounds and can be pruned without changing the feasible set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .digraph import SetupConstraintMatrices, setup_constraint_matrices
from .errors import NotOneSidedError
from .model import SwitchedActuatorModel


@dataclass(frozen=True)
class LinearConstraintBlock:
    """Rows of ``coef_u @ u_k + coef_act @ act_{k-tau} <= rhs``.

    ``tag`` names the generating rule; ``row_modes`` records, per row, the
    mode whose input block the row restricts (used for pruning and counts).
    """

    tag: str
    tau: int
    coef_u: np.ndarray
    coef_act: np.ndarray
    rhs: np.ndarray
    row_modes: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.coef_u.shape[0]

    def satisfied(self, u_k: np.ndarray, act_lag: np.ndarray, tol: float = 1e-9) -> bool:
        """Evaluate the block at concrete input and lagged activator vectors."""
        lhs = self.coef_u @ u_k + self.coef_act @ act_lag
        return bool(np.all(lhs <= self.rhs + tol))


@dataclass(frozen=True)
class InputConstraintMatrices:
    """Per-lag bound matrices mapping activators to channel bounds.

    ``u_upper_0`` is block diagonal: column q holds mode q's upper bounds in
    its own block.  For lag tau >= 1, column q~ of ``u_upper_tau[tau-1]``
    holds mode q's bounds scaled by the (q~, q) entry of the lag-tau gate
    matrix — i.e. the bound opens only if the activator tau samples ago
    pointed somewhere the current mode is reachable from in time.
    ``j_u`` sums each mode's channels (one row per mode).
    """

    u_lower_0: np.ndarray
    u_upper_0: np.ndarray
    u_lower_tau: tuple[np.ndarray, ...]
    u_upper_tau: tuple[np.ndarray, ...]
    j_u: np.ndarray


def input_sum_matrix(model: SwitchedActuatorModel) -> np.ndarray:
    """0/1 matrix summing the input channels of each mode (n_modes x n_u)."""
    j = np.zeros((model.n_modes, model.n_u))
    for q in range(model.n_modes):
        j[q, model.mode_slice(q)] = 1.0
    return j


def input_constraint_matrices(model: SwitchedActuatorModel,
                              gates: SetupConstraintMatrices | None = None
                              ) -> InputConstraintMatrices:
    """Assemble the per-lag bound matrices for ``model``."""
    if gates is None:
        gates = setup_constraint_matrices(model.graph)
    n_u, n_q = model.n_u, model.n_modes
    lower0 = np.zeros((n_u, n_q))
    upper0 = np.zeros((n_u, n_q))
    for q in range(n_q):
        sl = model.mode_slice(q)
        lower0[sl, q] = model.u_lower[sl]
        upper0[sl, q] = model.u_upper[sl]
    lowers, uppers = [], []
    for tau in range(1, gates.s_bar + 1):
        # column q~ of the lag-tau matrix = mode-block column of lag 0 scaled
        # by gate[q~, q] for each receiving mode q, i.e. U_0 @ gate'.
        gate = gates.matrix(tau).astype(float)
        lowers.append(lower0 @ gate.T)
        uppers.append(upper0 @ gate.T)
    return InputConstraintMatrices(
        u_lower_0=lower0,
        u_upper_0=upper0,
        u_lower_tau=tuple(lowers),
        u_upper_tau=tuple(uppers),
        j_u=input_sum_matrix(model),
    )


def _block_row_modes(model: SwitchedActuatorModel) -> np.ndarray:
    modes = np.empty(model.n_u, dtype=np.int64)
    for q in range(model.n_modes):
        modes[model.mode_slice(q)] = q
    return modes


def build_mode_gate(model: SwitchedActuatorModel,
                    mats: InputConstraintMatrices | None = None) -> LinearConstraintBlock:
    """Two-sided lag-0 gate: the activator opens exactly its own block's bounds.

    Rows: ``u_k - U_upper_0 act_k <= 0`` and ``-u_k + U_lower_0 act_k <= 0``.
    With a one-hot activator this forces every inactive block to zero and
    keeps the active block inside its bounds.
    """
    if mats is None:
        mats = input_constraint_matrices(model)
    n_u = model.n_u
    eye = np.eye(n_u)
    coef_u = np.vstack([eye, -eye])
    coef_act = np.vstack([-mats.u_upper_0, mats.u_lower_0])
    rm = _block_row_modes(model)
    return LinearConstraintBlock(
        tag="mode_gate", tau=0,
        coef_u=coef_u, coef_act=coef_act,
        rhs=np.zeros(2 * n_u), row_modes=np.concatenate([rm, rm]),
    )


def build_setup_gates(model: SwitchedActuatorModel,
                      gates: SetupConstraintMatrices | None = None,
                      mats: InputConstraintMatrices | None = None
                      ) -> list[LinearConstraintBlock]:
    """Two-sided gates for each lag tau = 1..s_bar.

    Row block q opens only when the activator tau samples ago pointed at a
    mode within switching distance tau of q; otherwise the block pins
    mode q's channels to zero, enforcing the zero-input phase of a switch.
    """
    if gates is None:
        gates = setup_constraint_matrices(model.graph)
    if mats is None:
        mats = input_constraint_matrices(model, gates)
    n_u = model.n_u
    eye = np.eye(n_u)
    rm = _block_row_modes(model)
    out = []
    for tau in range(1, gates.s_bar + 1):
        out.append(LinearConstraintBlock(
            tag="setup_gate", tau=tau,
            coef_u=np.vstack([eye, -eye]),
            coef_act=np.vstack([-mats.u_upper_tau[tau - 1], mats.u_lower_tau[tau - 1]]),
            rhs=np.zeros(2 * n_u), row_modes=np.concatenate([rm, rm]),
        ))
    return out


def build_setup_gates_onesided(model: SwitchedActuatorModel,
                               gates: SetupConstraintMatrices | None = None,
                               uniform: bool = False) -> list[LinearConstraintBlock]:
    """Summed one-sided gates (lags 0..s_bar) for nonnegative inputs.

    Plain form: ``J_u u_k <= J_u U_upper_tau act_{k-tau}`` (one row per mode
    and lag).  Uniform form (requires ``model.sum_bound``): the right-hand
    side becomes the common cap routed through the lag-tau gate matrix,
    ``J_u u_k <= cap * gate_tau' act_{k-tau}``, with the lag-0 rows
    ``J_u u_k <= cap * act_k``.  Together with the plain bounds
    ``0 <= u <= u_upper`` either family carves out the same feasible set as
    the two-sided gates plus the per-mode cap.

    Raises
    ------
    NotOneSidedError
        If any lower input bound is nonzero.
    """
    if not model.one_sided:
        raise NotOneSidedError("one-sided gates require u_lower == 0 on every channel")
    if gates is None:
        gates = setup_constraint_matrices(model.graph)
    mats = input_constraint_matrices(model, gates)
    if uniform and model.sum_bound is None:
        raise ValueError("uniform one-sided gates need model.sum_bound")
    n_q = model.n_modes
    j_u = mats.j_u
    row_modes = np.arange(n_q, dtype=np.int64)
    blocks = []
    if uniform:
        cap = float(model.sum_bound)
        blocks.append(LinearConstraintBlock(
            tag="setup_gate_uniform", tau=0,
            coef_u=j_u.copy(), coef_act=-cap * np.eye(n_q),
            rhs=np.zeros(n_q), row_modes=row_modes.copy(),
        ))
        for tau in range(1, gates.s_bar + 1):
            gate = gates.matrix(tau).astype(float)
            blocks.append(LinearConstraintBlock(
                tag="setup_gate_uniform", tau=tau,
                coef_u=j_u.copy(), coef_act=-cap * gate.T,
                rhs=np.zeros(n_q), row_modes=row_modes.copy(),
            ))
    else:
        blocks.append(LinearConstraintBlock(
            tag="setup_gate_sum", tau=0,
            coef_u=j_u.copy(), coef_act=-(j_u @ mats.u_upper_0),
            rhs=np.zeros(n_q), row_modes=row_modes.copy(),
        ))
        for tau in range(1, gates.s_bar + 1):
            blocks.append(LinearConstraintBlock(
                tag="setup_gate_sum", tau=tau,
                coef_u=j_u.copy(), coef_act=-(j_u @ mats.u_upper_tau[tau - 1]),
                rhs=np.zeros(n_q), row_modes=row_modes.copy(),
            ))
    return blocks


def build_sum_cap(model: SwitchedActuatorModel) -> LinearConstraintBlock:
    """Unconditional per-mode cap ``J_u u_k <= sum_bound`` (no activator part)."""
    if model.sum_bound is None:
        raise ValueError("model has no sum_bound")
    n_q = model.n_modes
    return LinearConstraintBlock(
        tag="power_cap", tau=0,
        coef_u=input_sum_matrix(model),
        coef_act=np.zeros((n_q, n_q)),
        rhs=np.full(n_q, float(model.sum_bound)),
        row_modes=np.arange(n_q, dtype=np.int64),
    )


def prune_redundant(blocks: list[LinearConstraintBlock],
                    gates: SetupConstraintMatrices
                    ) -> tuple[list[LinearConstraintBlock], int]:
    """Drop rows generated by all-ones gate-matrix columns.

    If every mode can reach q within tau samples, the lag-tau row for q is
    implied by the plain bounds (any one-hot history activator fully opens
    it), so removing the row leaves the feasible set unchanged.
    """
    out = []
    removed = 0
    for blk in blocks:
        if blk.tau < 1 or blk.row_modes is None or blk.tau > gates.s_bar:
            out.append(blk)
            continue
        ones = gates.all_ones_columns(blk.tau)
        keep = ~ones[blk.row_modes]
        removed += int(np.sum(~keep))
        if keep.all():
            out.append(blk)
        elif keep.any():
            out.append(replace(
                blk,
                coef_u=blk.coef_u[keep],
                coef_act=blk.coef_act[keep],
                rhs=blk.rhs[keep],
                row_modes=blk.row_modes[keep],
            ))
    return out, removed


def count_rows(blocks: list[LinearConstraintBlock]) -> int:
    return sum(b.n_rows for b in blocks)


def rows_by_tag(blocks: list[LinearConstraintBlock]) -> dict[str, int]:
    out: dict[str, int] = {}
    for b in blocks:
        out[b.tag] = out.get(b.tag, 0) + b.n_rows
    return out


def blocks_satisfied(blocks, u_k: np.ndarray, act_history, tol: float = 1e-9) -> bool:
    """Evaluate blocks at an input sample given the activator history.

    ``act_history[tau]`` must provide the activator ``tau`` samples before
    the input sample (index 0 = same sample).
    """
    return all(blk.satisfied(u_k, np.asarray(act_history[blk.tau], dtype=float), tol)
               for blk in blocks)


def sampled_gate_equivalence(model: SwitchedActuatorModel, act_history,
                             n_samples: int, rng: np.random.Generator,
                             tol: float = 1e-9) -> int:
    """Count membership disagreements between the two constraint families.

    Samples inputs uniformly over the bounding box and evaluates (a) the
    two-sided gates plus the per-mode cap and (b) the uniform one-sided
    gates, both relative to the same activator history.  Returns the number
    of disagreeing samples (0 when the families describe the same set).
    """
    gates = setup_constraint_matrices(model.graph)
    mats = input_constraint_matrices(model, gates)
    general = [build_mode_gate(model, mats)] + build_setup_gates(model, gates, mats)
    general.append(build_sum_cap(model))
    simplified = build_setup_gates_onesided(model, gates, uniform=True)
    disagreements = 0
    lo, hi = model.u_lower, model.u_upper
    for _ in range(n_samples):
        u = rng.uniform(lo, hi)
        in_general = blocks_satisfied(general, u, act_history, tol)
        in_simplified = blocks_satisfied(simplified, u, act_history, tol)
        if in_general != in_simplified:
            disagreements += 1
    return disagreements
