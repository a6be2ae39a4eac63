"""Exception types shared across the package.

Config/contract violations are ValueError subclasses (CLI exit code 2),
runtime failures are RuntimeError subclasses (CLI exit code 3).
"""


class ConfigError(ValueError):
    """Bad or unknown run-configuration key/value."""


class ParameterError(ValueError):
    """Argument outside its documented domain."""


class ContractError(ValueError):
    """Call violates a variant/usage contract (e.g. PRIMARY without control)."""


class ShapeError(RuntimeError):
    """Array shapes inconsistent with each other or with a config."""


class TrajectoryError(RuntimeError):
    """Motion trajectory does not tile the k-space rows."""


class GateFailure(RuntimeError):
    """SSIM gate could not be satisfied within the retry budget."""

    def __init__(self, message: str, best_ssim: float):
        super().__init__(message)
        self.best_ssim = best_ssim


class BuildError(RuntimeError):
    """Dataset build failed beyond the configured tolerance."""


class NumericalError(RuntimeError):
    """Non-finite or numerically invalid intermediate result."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
