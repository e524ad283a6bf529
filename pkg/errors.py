"""
Exception hierarchy for the macrostate toolkit
"""


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(ToolkitError, ValueError):
    """Run configuration is missing fields or fails schema validation"""


class SchemaError(ToolkitError, LookupError):
    """A column is unknown, has the wrong role, or the wrong kind"""


class BinningError(ToolkitError, ValueError):
    """Bins cannot be built or a value falls outside the bin range"""


class DensityError(ToolkitError, RuntimeError):
    """Conditional density training diverged"""


class UnseenCovariateError(ToolkitError, LookupError):
    """Frequency table asked about a covariate combination it never saw"""


class ClusteringError(ToolkitError, ValueError):
    """Invalid clustering request or partition"""


class ZeroProbabilityError(ToolkitError, ValueError):
    """A micro-state has zero marginal probability in a synthetic SCM"""


class RegularityError(ToolkitError, ValueError):
    """Regularity audit cannot be carried out as requested"""


class RankDeficiencyError(ToolkitError, ValueError):
    """Design matrix is not of full column rank"""

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(ToolkitError, RuntimeError):
    """Logistic propensity model diverged because of (quasi-)perfect separation"""


class MatchingError(ToolkitError, ValueError):
    """Matching or effect estimation has nothing to work with"""


class EmptyStratumError(ToolkitError, ValueError):
    """A stratum lacks one of the treatment arms"""


class StageError(ToolkitError):
    """A pipeline stage failed; carries the stage name and the original cause"""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
