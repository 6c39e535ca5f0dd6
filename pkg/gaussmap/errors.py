class GaussMapError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes a command."""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InputError(GaussMapError, ValueError):
    """Invalid geometric or measure input."""


class ConvexityLossError(GaussMapError):
    """A discrete radius of curvature became non-positive."""

    def __init__(self, detail: str, index: int | None = None):
        super().__init__(detail)
        self.index = index


class MapInversionError(GaussMapError):
    """The pairing behind a transport map is not a bijection."""


class ConfigError(GaussMapError):
    exit_code = 2


class SolverError(GaussMapError):
    exit_code = 3

    def __init__(self, detail: str, t: float | None = None):
        if t is not None:
            detail = f"{detail} (t={t:g})"
        super().__init__(detail)
        self.t = t


class InfeasibleWeightsError(SolverError):
    pass


class CostMatrixTooLargeError(SolverError):
    pass


class SolverConvergenceError(SolverError):
    def __init__(self, detail: str, violation: float, t: float | None = None):
        super().__init__(f"{detail}: marginal violation {violation:.3e}", t)
        self.violation = violation


class FlowCollapsedError(GaussMapError):
    """The flow degenerated (before the first recorded level when raised by the CLI)."""

    exit_code = 4


class VerificationError(GaussMapError):
    exit_code = 1

    def __init__(self, detail: str, failures: list[str] | None = None):
        super().__init__(detail)
        self.failures = failures or []
