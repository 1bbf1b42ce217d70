"""Exception types raised across the package."""


class NKTeamsError(Exception):
    """Base class for all package errors."""


class ParameterError(NKTeamsError, ValueError):
    """A parameter is outside its admissible range."""


class GeometryError(ParameterError):
    """Task geometry is inconsistent (block sizes, subtask sizes)."""


class EnumerationLimitError(NKTeamsError, RuntimeError):
    """Exhaustive enumeration was requested for too many decisions."""


class ContractError(NKTeamsError, AssertionError):
    """An internal precondition was violated; indicates a bug upstream."""


class SchemaError(NKTeamsError, ValueError):
    """Tabular input does not match the expected schema."""


class ConfigError(ParameterError):
    """Invalid configuration value. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class ManifestMismatchError(NKTeamsError, RuntimeError):
    """A checkpoint manifest belongs to a different grid."""


class RoundFailures(NKTeamsError, RuntimeError):
    """One or more simulation rounds raised.

    ``results`` holds the rounds that completed, ``failed`` maps round index
    to the error message of each round that did not.
    """

    def __init__(self, failed, results):
        idx = ", ".join(str(i) for i in sorted(failed))
        super().__init__(f"{len(failed)} round(s) failed: {idx}")
        self.failed = dict(failed)
        self.results = list(results)
