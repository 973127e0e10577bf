"""Switched-actuator plant description.

The plant is a discrete-time linear system whose input channels are grouped
into disjoint per-mode blocks; at any sample the actuator either operates in
one mode (only that block may be nonzero) or is switching between modes (all
inputs are zero).  Physically shared channels are duplicated into per-mode
copies so the blocks are disjoint by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .digraph import SetupDigraph
from .errors import DimensionMismatchError


@dataclass(frozen=True)
class Operational:
    """Actuator resides in (and may drive) ``mode``."""

    mode: int


@dataclass(frozen=True)
class Switching:
    """Actuator is reconfiguring from ``origin`` to ``dest``; inputs are disabled."""

    origin: int
    dest: int

    def __post_init__(self):
        if self.origin == self.dest:
            raise ValueError("a switch must connect two distinct modes")


ActuatorState = Operational | Switching


def post_mode(state: ActuatorState) -> int:
    """Destination mode of a state: the mode itself, or the switch target."""
    return state.mode if isinstance(state, Operational) else state.dest


def activator_of(state: ActuatorState, n_modes: int) -> np.ndarray:
    """One-hot vector marking the destination mode of ``state``.

    The activator deliberately does not distinguish "operating in q" from
    "switching toward q"; the setup-time gates recover that distinction from
    the activator history.
    """
    q = post_mode(state)
    if not 0 <= q < n_modes:
        raise ValueError(f"mode index {q} out of range for {n_modes} modes")
    vec = np.zeros(n_modes, dtype=np.int64)
    vec[q] = 1
    return vec


def post_set(state: Switching, graph: SetupDigraph) -> frozenset[ActuatorState]:
    """States reachable right after a switch completes.

    On arrival at the switch target r the actuator may operate in r, start a
    new timed switch out of r, or — for zero-setup arcs — appear directly in
    the arrival mode of an instantaneous follow-up switch.
    """
    r = state.dest
    setup = graph.setup
    out: set[ActuatorState] = {Operational(r)}
    for p in range(graph.n_modes):
        if p == r:
            continue
        if setup[r, p] > 0:
            out.add(Switching(r, p))
        else:
            out.add(Operational(p))
    return frozenset(out)


class EmptyModeWarning(UserWarning):
    """A mode selects no input channels (it can never apply power)."""


@dataclass(frozen=True)
class InputLayout:
    """Mapping from duplicated per-mode channels back to shared physical channels.

    ``column_map[j]`` is the physical channel feeding duplicated column j;
    mode q owns the contiguous block ``mode_slice(q)``.
    """

    mode_dims: tuple[int, ...]
    column_map: tuple[int, ...]

    @property
    def n_u(self) -> int:
        return len(self.column_map)

    @property
    def n_modes(self) -> int:
        return len(self.mode_dims)

    def mode_slice(self, q: int) -> slice:
        start = sum(self.mode_dims[:q])
        return slice(start, start + self.mode_dims[q])

    def expand_columns(self, b_raw: np.ndarray) -> np.ndarray:
        """Duplicate columns of an input matrix over shared channels."""
        b_raw = np.asarray(b_raw, dtype=float)
        if b_raw.ndim != 2:
            raise ValueError("input matrix must be 2-D")
        if b_raw.shape[1] <= max(self.column_map, default=-1):
            raise DimensionMismatchError(
                f"input matrix has {b_raw.shape[1]} columns, "
                f"layout references channel {max(self.column_map)}"
            )
        return b_raw[:, list(self.column_map)]


def duplicate_shared_inputs(mode_channels: list[list[int]]) -> InputLayout:
    """Build a disjoint per-mode channel layout from shared channel selections.

    Parameters
    ----------
    mode_channels : list of list of int
        ``mode_channels[q]`` lists the physical channel indices mode q drives.
        Channels may appear under several modes; each occurrence becomes its
        own column.  A mode with an empty list is flagged with
        :class:`EmptyModeWarning` but accepted.
    """
    if not mode_channels:
        raise ValueError("at least one mode is required")
    dims = []
    colmap: list[int] = []
    for q, chans in enumerate(mode_channels):
        if len(chans) == 0:
            warnings.warn(f"mode {q + 1} selects no input channels", EmptyModeWarning)
        if len(set(chans)) != len(chans):
            raise ValueError(f"mode {q + 1} lists a channel twice")
        for c in chans:
            if c < 0:
                raise ValueError(f"channel indices must be nonnegative, got {c}")
            colmap.append(int(c))
        dims.append(len(chans))
    return InputLayout(mode_dims=tuple(dims), column_map=tuple(colmap))


class SwitchedActuatorModel:
    """Discrete-time LTI plant with mode-partitioned inputs and a setup digraph.

    Parameters
    ----------
    a : (n_x, n_x) array_like
        State matrix.
    b : (n_x, n_u) array_like
        Input matrix; columns are grouped into contiguous per-mode blocks.
    graph : SetupDigraph
        Setup times between the modes.
    mode_dims : sequence of int
        Number of input channels owned by each mode; must sum to n_u and
        match ``graph.n_modes`` in length.
    u_lower, u_upper : (n_u,) array_like
        Per-channel input bounds with ``u_lower <= 0 <= u_upper`` so the
        forced zero input during switches is always feasible.
    sum_bound : float, optional
        Common cap on the summed input of the active mode (e.g. a per-cell
        power budget).  Required by the uniform one-sided constraint form.
    """

    def __init__(self, a, b, graph: SetupDigraph, mode_dims, u_lower=None, u_upper=None,
                 sum_bound: float | None = None):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatchError(f"state matrix must be square, got {a.shape}")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise DimensionMismatchError(
                f"input matrix rows {b.shape} must match state dimension {a.shape[0]}"
            )
        if not isinstance(graph, SetupDigraph):
            raise TypeError("graph must be a SetupDigraph")
        dims = tuple(int(d) for d in mode_dims)
        if len(dims) != graph.n_modes:
            raise DimensionMismatchError(
                f"{len(dims)} mode blocks for a digraph with {graph.n_modes} modes"
            )
        if any(d < 0 for d in dims):
            raise ValueError("mode dimensions must be nonnegative")
        if sum(dims) != b.shape[1]:
            raise DimensionMismatchError(
                f"mode dimensions sum to {sum(dims)}, input matrix has {b.shape[1]} columns"
            )
        n_u = b.shape[1]
        if u_upper is None:
            raise ValueError("u_upper is required")
        u_upper = np.broadcast_to(np.asarray(u_upper, dtype=float), (n_u,)).copy()
        if u_lower is None:
            u_lower = np.zeros(n_u)
        u_lower = np.broadcast_to(np.asarray(u_lower, dtype=float), (n_u,)).copy()
        if np.any(u_lower > 0) or np.any(u_upper < 0):
            raise ValueError("input bounds must satisfy u_lower <= 0 <= u_upper "
                             "(zero input must stay feasible during switches)")
        if sum_bound is not None and sum_bound < 0:
            raise ValueError("sum_bound must be nonnegative")
        self.a = a
        self.b = b
        self.graph = graph
        self.mode_dims = dims
        self.u_lower = u_lower
        self.u_upper = u_upper
        self.sum_bound = None if sum_bound is None else float(sum_bound)
        offsets = np.concatenate([[0], np.cumsum(dims)])
        self._slices = tuple(slice(int(offsets[q]), int(offsets[q + 1]))
                             for q in range(len(dims)))

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    @property
    def n_modes(self) -> int:
        return self.graph.n_modes

    def mode_slice(self, q: int) -> slice:
        """Column slice of the input vector owned by mode ``q``."""
        if not 0 <= q < self.n_modes:
            raise ValueError(f"mode index {q} out of range for {self.n_modes} modes")
        return self._slices[q]

    @property
    def one_sided(self) -> bool:
        """True when every lower input bound is exactly zero."""
        return bool(np.all(self.u_lower == 0.0))

    def input_zero_tol(self) -> float:
        """Default magnitude below which an input channel counts as 'off'."""
        scale = max(np.max(np.abs(self.u_upper), initial=0.0),
                    np.max(np.abs(self.u_lower), initial=0.0))
        return 1e-9 * scale

    def __repr__(self) -> str:
        return (f"SwitchedActuatorModel(n_x={self.n_x}, n_u={self.n_u}, "
                f"n_modes={self.n_modes})")
