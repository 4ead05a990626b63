from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional


@dataclass(frozen=True)
class AnalysisIssue:
    code: str
    message: str
    context: Optional[Dict[str, Any]] = None


class DspRegError(Exception):
    """Base class for all errors raised by the package.

    Attributes:
        exit_code: Process exit code the command-line entry point uses when the
            error escapes a subcommand.
    """

    exit_code = 2


class ContractError(DspRegError):
    """An API precondition was violated by the caller (e.g. non-scalar loss)."""

    exit_code = 2


class ProtocolError(DspRegError):
    """The experiment protocol cannot be satisfied (too few domains, bad split)."""

    exit_code = 2


class CapabilityError(DspRegError):
    """The requested computation is not supported for this model or head."""

    exit_code = 2


class DataError(DspRegError):
    """Input data is invalid: bad labels, non-PSD covariance, empty dataset."""

    exit_code = 3


class DimensionError(DataError):
    """Shape mismatch between data, parameters and the model definition."""


class NonFiniteError(DataError):
    """A tape operation produced NaN or Inf values."""


class ParseError(DataError):
    """A file could not be parsed.

    Attributes:
        path: File being parsed, if known.
        line: 1-based line number of the offending row, if known.
    """

    def __init__(
        self, message: str, *, path: Optional[str] = None, line: Optional[int] = None
    ) -> None:
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class DivergenceError(DspRegError):
    """Training produced a non-finite loss.

    Attributes:
        lam: Regularization strength in effect.
        learning_rate: Step size in effect.
        epoch: Epoch (0-based) in which the loss diverged.
        step: Global optimizer step at which the loss diverged.
    """

    exit_code = 4

    def __init__(
        self, message: str, *, lam: float, learning_rate: float, epoch: int, step: int
    ) -> None:
        super().__init__(
            f"{message} (lambda={lam:g}, learning_rate={learning_rate:g}, "
            f"epoch={epoch}, step={step})"
        )
        self.lam = lam
        self.learning_rate = learning_rate
        self.epoch = epoch
        self.step = step


class ValidationFailure(DspRegError):
    """One or more oracle checks of the validation suite failed."""

    exit_code = 1
