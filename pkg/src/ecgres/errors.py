"""Exception hierarchy.

Every error class carries an ``exit_code`` so the CLI can map failures to
distinct process exit statuses without a lookup table of its own.
"""


class EcgResError(Exception):
    exit_code = 1


# --- ingest -----------------------------------------------------------------
class MalformedHeader(EcgResError):
    exit_code = 10


class UnsupportedFormat(EcgResError):
    exit_code = 11


class TruncatedSignal(EcgResError):
    exit_code = 12


class FormatMismatch(EcgResError):
    exit_code = 13


class MalformedAnnotation(EcgResError):
    exit_code = 14


# --- dataset ----------------------------------------------------------------
class EmptyClassPool(EcgResError):
    exit_code = 20


class InsufficientSegments(EcgResError):
    exit_code = 21


# --- encoder ----------------------------------------------------------------
class InvalidConfig(EcgResError):
    exit_code = 30


class NonMonotone(EcgResError):
    exit_code = 31


# --- topology / simulator ---------------------------------------------------
class InfeasibleConstraint(EcgResError):
    exit_code = 40


class UnstableConfig(EcgResError):
    exit_code = 41


class TuningFailed(EcgResError):
    exit_code = 42


# --- readout / eval ---------------------------------------------------------
class SingularSystem(EcgResError):
    exit_code = 50


class DegenerateScores(EcgResError):
    exit_code = 51


class CoverageGap(EcgResError):
    exit_code = 52


# --- pipeline ---------------------------------------------------------------
class StaleArtifact(EcgResError):
    exit_code = 60


class StageFailure(EcgResError):
    exit_code = 61

    def __init__(self, message: str = "", cause: BaseException | None = None):
        super().__init__(message)
        self.cause = cause


class ConfigError(EcgResError):
    exit_code = 62
