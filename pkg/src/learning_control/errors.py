"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, divergence 3, I/O 4), so library
code should raise the most specific one that applies instead of bare ValueError
whenever the condition is user-facing.
"""


class LearningControlError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(LearningControlError):
    """Bad user input: malformed config file, unknown key, invalid combination.

    Carries optional file/line provenance so the CLI can point at the
    offending line.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class DivergenceError(LearningControlError):
    """Numerical blow-up during integration (a weight left the trust region)."""


class DataFormatError(LearningControlError):
    """Malformed binary/tensor input, e.g. a truncated or mislabeled IDX file."""


class UnsupportedOperationError(LearningControlError):
    """A well-formed request the current object cannot honor.

    Typical case: asking a moment-only task (no known generative family)
    for samples.
    """
