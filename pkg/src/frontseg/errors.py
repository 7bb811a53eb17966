"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: usage/config problems exit 2, missing
inputs exit 3, numeric failures exit 4.
"""


class ShapeError(ValueError):
    """Array shape violates an operation's contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data violates a precondition (bad labels, missing ground truth)."""


class ParseError(ValueError):
    """A file on disk could not be parsed; message names the file."""


class MissingInputError(FileNotFoundError):
    """A required input artifact (scene, checkpoint, ...) does not exist."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names epoch and term."""
