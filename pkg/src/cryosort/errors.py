"""Exception hierarchy shared by every stage of the pipeline.

Each class carries a short machine-readable ``code`` and the process exit
status the command line uses when the error escapes a stage.
"""


class CryosortError(Exception):
    code = "E_INTERNAL"
    exit_status = 5


class ParameterError(CryosortError, ValueError):
    code = "E_PARAMETER"
    exit_status = 2


class ConfigError(ParameterError):
    code = "E_CONFIG"


class PlacementError(CryosortError):
    """Raised when the simulator cannot place every requested particle."""

    code = "E_PLACEMENT"
    exit_status = 2

    def __init__(self, message, placed):
        super().__init__(message)
        self.placed = placed


class ExtractionError(CryosortError):
    code = "E_EXTRACTION"


class ScoreError(CryosortError):
    code = "E_SCORE"


class FitError(CryosortError):
    code = "E_FIT"

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class ThresholdError(CryosortError):
    code = "E_THRESHOLD"


class SortInfeasibleError(CryosortError):
    """The score histogram is unimodal, so no threshold can be derived."""

    code = "E_UNIMODAL"
    exit_status = 3


class InsufficientDataError(CryosortError):
    code = "E_INSUFFICIENT_DATA"
    exit_status = 4


class InvariantError(CryosortError):
    code = "E_INVARIANT"
    exit_status = 5
