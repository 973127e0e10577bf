"""Setup-time digraphs: validation, completion, and switching-gate matrices.

A switched-actuator system carries a complete simple digraph over its modes;
the arc weight ``setup[q, r]`` is the number of samples every input must stay
zero while the actuator reconfigures from mode ``q`` to mode ``r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DiagonalNonzeroError,
    NotStronglyConnectedError,
    TriangleViolationError,
)


def _as_setup_array(setup) -> np.ndarray:
    arr = np.asarray(setup)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise ValueError(f"setup matrix must be square and nonempty, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)):
            raise ValueError("setup times must be finite")
        if np.any(arr != np.round(arr)):
            raise ValueError("setup times must be integer sample counts")
    elif arr.dtype.kind not in "iu":
        raise ValueError(f"setup times must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise ValueError("setup times must be nonnegative")
    return arr


class SetupDigraph:
    """Complete arc-weighted digraph of mode switches.

    Parameters
    ----------
    setup : (n, n) array_like of int
        Nonnegative setup times in samples.  The diagonal must be zero and
        the weights must satisfy the triangle inequality
        ``setup[q, r] <= setup[q, p] + setup[p, r]`` (a direct switch is
        never slower than routing through a third mode).

    Raises
    ------
    DiagonalNonzeroError, TriangleViolationError, ValueError
    """

    def __init__(self, setup):
        arr = _as_setup_array(setup)
        n = arr.shape[0]
        bad = np.flatnonzero(np.diagonal(arr))
        if bad.size:
            raise DiagonalNonzeroError(int(bad[0]))
        if n >= 3:
            # via[q, p, r] = setup[q, p] + setup[p, r]; the minimum over p is
            # never above setup[q, r] (p = q gives equality), so any strict
            # drop is a triangle violation.
            via = arr[:, :, None] + arr[None, :, :]
            best = via.min(axis=1)
            viol = np.argwhere(best < arr)
            if viol.size:
                q, r = (int(v) for v in viol[0])
                p = int(np.argmin(via[q, :, r]))
                raise TriangleViolationError(q, p, r, int(arr[q, r]), int(via[q, p, r]))
        arr.setflags(write=False)
        self._setup = arr

    @property
    def setup(self) -> np.ndarray:
        """Read-only (n, n) integer setup-time matrix."""
        return self._setup

    @property
    def n_modes(self) -> int:
        return self._setup.shape[0]

    @property
    def max_setup(self) -> int:
        """Largest setup time in the digraph (0 when switching is free)."""
        return int(self._setup.max()) if self.n_modes else 0

    def max_setup_into(self, dest: int) -> int:
        """Largest setup time over arcs arriving at ``dest``."""
        self._check_mode(dest)
        return int(self._setup[:, dest].max())

    def modes_within(self, dest: int, tau: int) -> frozenset[int]:
        """Modes from which a switch to ``dest`` takes fewer than ``tau`` samples.

        ``dest`` itself is always a member (its setup time is zero).
        """
        self._check_mode(dest)
        if tau < 1:
            raise ValueError(f"tau must be >= 1, got {tau}")
        return frozenset(int(q) for q in np.flatnonzero(self._setup[:, dest] < tau))

    def _check_mode(self, q: int) -> None:
        if not 0 <= q < self.n_modes:
            raise ValueError(f"mode index {q} out of range for {self.n_modes} modes")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SetupDigraph):
            return NotImplemented
        return self._setup.shape == other._setup.shape and bool(
            np.all(self._setup == other._setup)
        )

    def __repr__(self) -> str:
        return f"SetupDigraph(n_modes={self.n_modes}, max_setup={self.max_setup})"


def validate_digraph(setup) -> SetupDigraph:
    """Validate a setup matrix and wrap it in a :class:`SetupDigraph`."""
    return SetupDigraph(setup)


def complete_from_strongly_connected(partial) -> SetupDigraph:
    """Fill missing arcs of a strongly connected partial digraph.

    Missing arcs may be marked with ``None`` (nested lists) or with
    ``nan``/``inf`` (float arrays).  Each missing arc (q, r) is assigned the
    minimum cumulative setup time over directed paths of defined arcs from q
    to r; defined arcs are kept as given.  The completed matrix is validated,
    so a defined arc that is slower than some path still raises
    :class:`~switchmpc.errors.TriangleViolationError`.

    Raises
    ------
    NotStronglyConnectedError
        If some ordered pair of modes has no connecting path.
    """
    raw = np.asarray(partial, dtype=object)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1] or raw.shape[0] == 0:
        raise ValueError(f"partial setup matrix must be square, got shape {raw.shape}")
    n = raw.shape[0]
    weights = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(n):
            v = raw[i, j]
            if v is None:
                continue
            fv = float(v)
            if np.isnan(fv) or np.isinf(fv):
                continue
            if fv != round(fv) or fv < 0:
                raise ValueError(f"defined setup times must be nonnegative integers, got {v!r}")
            weights[i, j] = fv
    defined = np.isfinite(weights)
    dist = weights.copy()
    np.fill_diagonal(dist, 0.0)
    for p in range(n):
        dist = np.minimum(dist, dist[:, p, None] + dist[None, p, :])
    if not np.all(np.isfinite(dist)):
        q, r = (int(v) for v in np.argwhere(~np.isfinite(dist))[0])
        raise NotStronglyConnectedError(q, r)
    filled = np.where(defined, weights, dist)
    np.fill_diagonal(filled, np.diagonal(weights) if np.all(np.isfinite(np.diagonal(weights))) else 0.0)
    filled[~np.isfinite(filled)] = 0.0
    return SetupDigraph(filled.astype(np.int64))


@dataclass(frozen=True)
class SetupConstraintMatrices:
    """Boolean gate matrices derived from a setup digraph.

    ``matrices[t - 1][q, r]`` is 1 exactly when ``setup[q, r] < t``, for
    ``t = 1 .. s_bar``.  Row q of matrix t therefore marks the modes
    reachable from q in fewer than t samples; column r marks the modes from
    which r is reachable that fast.  The list is empty when all switches are
    instantaneous.
    """

    s_bar: int
    matrices: tuple[np.ndarray, ...]

    def matrix(self, tau: int) -> np.ndarray:
        """Gate matrix for lag ``tau`` (1-based, ``tau <= s_bar``)."""
        if not 1 <= tau <= self.s_bar:
            raise ValueError(f"tau must be in [1, {self.s_bar}], got {tau}")
        return self.matrices[tau - 1]

    def all_ones_columns(self, tau: int) -> np.ndarray:
        """Boolean mask of columns of ``matrix(tau)`` that are entirely ones."""
        return self.matrix(tau).all(axis=0)


def setup_constraint_matrices(graph: SetupDigraph) -> SetupConstraintMatrices:
    """Build the per-lag Boolean gate matrices for ``graph``."""
    s = graph.setup
    mats = []
    for tau in range(1, graph.max_setup + 1):
        m = (s < tau).astype(np.int64)
        m.setflags(write=False)
        mats.append(m)
    return SetupConstraintMatrices(s_bar=graph.max_setup, matrices=tuple(mats))
