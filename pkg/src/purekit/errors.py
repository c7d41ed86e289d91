"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data/file problems with 3, numerical divergence with 4.
"""


class PurekitError(Exception):
    """Base class for all package errors."""


class ConfigError(PurekitError):
    """Invalid configuration, bad CLI arguments, or misuse of an API contract
    that stems from user-provided settings (shape mismatches, missing models)."""

    exit_code = 2


class ContractError(PurekitError):
    """A precondition of an operation was violated (e.g. gradient of a
    non-scalar graph). Programming error rather than bad input data."""

    exit_code = 2


class DataError(PurekitError):
    """Corrupt, truncated, or otherwise unusable data files."""

    exit_code = 3


class DivergenceError(PurekitError):
    """Numerical divergence during training or sampling; carries enough
    context (step index, magnitudes) to locate the blow-up."""

    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
