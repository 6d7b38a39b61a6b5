"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericError -> 4.
"""


class SpinLabError(Exception):
    """Base class for all package errors."""


class ConfigError(SpinLabError):
    """Invalid specification, configuration value, or unknown config key."""


class CorpusParseError(SpinLabError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InjectionError(SpinLabError):
    """Trigger injection impossible for the given sequence."""


class EmptyLossError(SpinLabError):
    """A loss term has zero scorable positions; carries the term name."""

    def __init__(self, term: str, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"no scorable positions in term '{term}'{detail}")
        self.term = term


class NumericError(SpinLabError):
    """Non-finite value encountered (gradient, loss, or training state)."""


class DegenerateDistributionError(SpinLabError):
    """All probability mass lost during a vocabulary remap."""


class MissingArtifactError(SpinLabError):
    """A required input artifact (checkpoint, corpus, vocab) is absent."""


class CheckpointMismatchError(SpinLabError):
    """Checkpoint header disagrees with the current vocab or config hash."""
