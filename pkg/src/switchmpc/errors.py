"""Exception types shared across the package.

Mode indices are 0-based everywhere in the API; error messages and any
serialized artifacts label modes 1-based (the convention used in the
accompanying docs and config files).
"""


class SwitchMpcError(Exception):
    """Base class for all package-specific errors."""


class DiagonalNonzeroError(SwitchMpcError):
    """A mode claims a nonzero setup time for switching to itself."""

    def __init__(self, mode: int):
        self.mode = mode
        super().__init__(f"setup time from mode {mode + 1} to itself must be zero")


class TriangleViolationError(SwitchMpcError):
    """A direct switch is slower than routing through an intermediate mode."""

    def __init__(self, q: int, p: int, r: int, direct: int, via: int):
        self.modes = (q, p, r)
        self.direct = direct
        self.via = via
        super().__init__(
            f"setup({q + 1}->{r + 1})={direct} exceeds "
            f"setup({q + 1}->{p + 1})+setup({p + 1}->{r + 1})={via}"
        )


class NotStronglyConnectedError(SwitchMpcError):
    """A partial digraph has no directed path between two modes."""

    def __init__(self, q: int, r: int):
        self.pair = (q, r)
        super().__init__(f"no directed path of defined arcs from mode {q + 1} to mode {r + 1}")


class NotFeasibleError(SwitchMpcError):
    """An activator/input pair violates the switching feasibility conditions."""


class NonDistinctWeightsError(SwitchMpcError):
    """Switch-cost weights must be pairwise distinct to guarantee a unique minimizer."""


class NotOneSidedError(SwitchMpcError):
    """One-sided constraint forms require all input lower bounds to be zero."""


class UnstableDiscretizationError(SwitchMpcError):
    """The explicit time discretization is unstable for the requested step."""

    def __init__(self, radius: float):
        self.radius = radius
        super().__init__(f"discretized dynamics are unstable: spectral radius {radius:.6f} > 1")


class CertificateFailedError(SwitchMpcError):
    """A numerical stability certificate did not hold."""

    def __init__(self, message: str, certificate=None):
        self.certificate = certificate
        super().__init__(message)


class DimensionMismatchError(SwitchMpcError):
    """Array shapes are inconsistent with the model dimensions."""


class ConfigError(SwitchMpcError):
    """A scenario configuration file is malformed or inconsistent."""


class SolverFailedError(SwitchMpcError):
    """The embedded MIQP solver did not return a usable solution."""


class NumericalBreakdownError(SwitchMpcError):
    """A linear-algebra step failed beyond recovery."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
