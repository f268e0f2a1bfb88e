"""Exception types raised across the package."""


class LieocpError(Exception):
    """Base class for all package errors."""


class AngleNearPi(LieocpError, ValueError):
    """A rotation angle is too close to pi for the exponential chart."""


class NoConvergence(LieocpError, RuntimeError):
    """The implicit attitude step did not converge."""


class SingularImplicitJacobian(LieocpError, RuntimeError):
    """The Jacobian of the implicit attitude residual is singular."""


class PlantFailure(LieocpError, RuntimeError):
    """A plant evaluation failed during a rollout.

    The failing stage is stored in ``stage``.
    """

    def __init__(self, stage, cause):
        super().__init__(f"plant failed at stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class UNotInBox(LieocpError, ValueError):
    """A control value lies outside its admissible box."""


class ProjectionStall(LieocpError, RuntimeError):
    """Alternating projections hit their sweep cap."""

    def __init__(self, message, box_violation=None, freq_violation=None):
        super().__init__(message)
        self.box_violation = box_violation
        self.freq_violation = freq_violation


class Infeasible(LieocpError, RuntimeError):
    """The constraints admit no solution (or the solver could not find one)."""


class MaxIterations(LieocpError, RuntimeError):
    """The solver exhausted its iteration budget.

    ``result`` holds the best point found together with its report.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class RankDeficientF(LieocpError, ValueError):
    """The frequency constraint matrix lost full row rank."""


class ConfigError(LieocpError, ValueError):
    """Base class for configuration problems."""


class ParseError(ConfigError):
    """The configuration file is not valid TOML."""


class SchemaError(ConfigError):
    """A configuration field is missing, unknown or mistyped."""

    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class DimensionMismatch(LieocpError, ValueError):
    """Trajectory files do not match the configured dimensions."""


class DynamicsMismatch(LieocpError, ValueError):
    """Stored states disagree with states re-rolled from the stored controls."""
