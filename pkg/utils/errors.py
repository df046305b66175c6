"""Exception hierarchy shared by every package in the repo."""

from __future__ import annotations


class RevampError(Exception):
    """Base class for all errors raised by this project"""


class DimensionError(RevampError, ValueError):
    """Tensor shapes do not conform for the requested op"""


class NumericError(RevampError, ArithmeticError):
    """An op produced NaN or Inf from finite inputs"""


class UsageError(RevampError, ValueError):
    """An API was called outside its preconditions"""


class ConfigError(RevampError, ValueError):
    """Invalid run configuration or config file"""


class SamplingError(RevampError, ValueError):
    """No admissible negative exists for the request"""


class SplitError(RevampError, ValueError):
    """A user sequence is too short for the leave-one-out split"""


class CheckpointError(RevampError, ValueError):
    """A checkpoint or cache file fails validation"""


class CorpusFormatError(RevampError, ValueError):
    """A corpus file line cannot be parsed or violates declared cardinalities"""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PretrainedVectorError(RevampError, KeyError):
    """A category has no pretrained vector and the fallback is disabled"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing pretrained vector"


class TrainingError(RevampError, RuntimeError):
    """Training diverged; carries the epoch and batch where it happened"""

    def __init__(self, message: str, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")


class IntegrityError(RevampError, IndexError):
    """An index points outside its table (an upstream clip or id violation)"""
