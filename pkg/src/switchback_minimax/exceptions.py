"""Error types shared across the package.

Each carries the CLI exit code it maps to.
"""


class SwitchbackError(Exception):
    exit_code = 1
    code = "error"


class ValidationError(SwitchbackError, ValueError):
    """Malformed input: bad parameters, files, or shapes."""

    exit_code = 1
    code = "validation_error"


class InfeasibleError(SwitchbackError, ValueError):
    """The instance admits no design of the requested form."""

    exit_code = 2
    code = "infeasible"


class InstanceTooLargeError(SwitchbackError, ValueError):
    """Exhaustive computation refused by a size guard."""

    exit_code = 1
    code = "instance_too_large"


class RegimeIndeterminateError(SwitchbackError):
    """Unit count lies between the two worst-case regimes.

    ``candidates`` maps regime label to the value computed under it.
    """

    exit_code = 2
    code = "regime_indeterminate"

    def __init__(self, message: str, candidates: dict):
        super().__init__(message)
        self.candidates = candidates
