"""Exception hierarchy shared by every stage of the rewrite pipeline."""


class RewriteError(Exception):
    """Base class for all package errors."""


class UnknownFeature(RewriteError, KeyError):
    pass


class DegenerateLabels(RewriteError, ValueError):
    """Raised when a computation needs both classes and only one is present."""


class DegenerateFeatures(UserWarning):
    """Warning: every candidate feature is constant, ranking falls back to lexical order."""


class MissingScoreTable(RewriteError, KeyError):
    pass


class NotASubset(RewriteError, ValueError):
    """A rewrite references tuples that are not part of its source EHR."""


class NonFiniteLoss(RewriteError, FloatingPointError):
    """Training diverged; usually the learning rate is too high."""


class EmptySample(RewriteError, ValueError):
    pass


class EndpointUnavailable(RewriteError, ConnectionError):
    pass


class MalformedResponse(RewriteError, ValueError):
    pass


class InfeasibleSpec(RewriteError, ValueError):
    pass


class MissingAttribute(RewriteError, KeyError):
    pass


class ParseError(RewriteError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(RewriteError, ValueError):
    def __init__(self, message, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class MissingArtifact(RewriteError, FileNotFoundError):
    pass


class ConfigError(RewriteError, ValueError):
    pass
