"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (1),
bad or insufficient data (2) and numerical failures (3).
"""


class ScoreNormError(Exception):
    exit_code = 2


class ValidationError(ScoreNormError):
    """Invalid configuration, spec or arguments."""

    exit_code = 1


class DataError(ScoreNormError):
    """Input data is malformed or too small for the requested operation."""

    exit_code = 2


class NumericError(ScoreNormError):
    exit_code = 3


class ConfigurationError(ValidationError):
    pass


class TableKindMismatch(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class ArityError(ValidationError):
    pass


class EmptyDistribution(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConsistencyError(ParseError):
    pass


class ManifestViolation(ParseError):
    pass


class MissingDemographic(DataError):
    def __init__(self, labels, detail=""):
        if isinstance(labels, str):
            labels = [labels]
        self.labels = list(labels)
        msg = "no usable records for demographic(s): " + ", ".join(self.labels)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InsufficientCohort(DataError):
    def __init__(self, key, count, required):
        self.key = key
        self.count = count
        self.required = required
        super().__init__(
            f"cohort group {key} has {count} scores, at least {required} required"
        )


class InsufficientRecords(DataError):
    pass


class InsufficientPairs(DataError):
    def __init__(self, label, requested, available, pair_type):
        self.label = label
        self.requested = requested
        self.available = available
        super().__init__(
            f"demographic {label!r}: {requested} {pair_type} pairs requested, "
            f"only {available} distinct pairs exist"
        )


class UnknownKey(DataError):
    pass


class NotEnoughDemographics(DataError):
    pass


class TagMismatch(DataError):
    pass


class DegenerateDistribution(NumericError):
    pass


class ConvergenceError(NumericError):
    pass
