"""Exception hierarchy shared by every otafl module."""
from __future__ import annotations


class OtaflError(Exception):
    """Base class for all errors raised deliberately by otafl."""


class InvalidArgumentError(OtaflError, ValueError):
    """An argument violates an operation's precondition."""


class SolverFailure(OtaflError, RuntimeError):
    """The parameter solver did not converge or hit an internal inconsistency."""

    def __init__(self, message: str, residuals: dict | None = None) -> None:
        super().__init__(message)
        self.residuals = dict(residuals or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.residuals:
            return base
        detail = ", ".join(f"{k}={v!r}" for k, v in sorted(self.residuals.items()))
        return f"{base} [{detail}]"


class IdxFormatError(OtaflError, ValueError):
    """An IDX file is malformed; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int, path: str = "") -> None:
        where = f"{path}@{offset}" if path else f"byte {offset}"
        super().__init__(f"{message} ({where})")
        self.offset = offset
        self.path = path


class ConfigError(OtaflError, ValueError):
    """A configuration file or value is invalid."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None) -> None:
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key:
            prefix.append(f"key '{key}'")
        text = f"{', '.join(prefix)}: {message}" if prefix else message
        super().__init__(text)
        self.line = line
        self.key = key


class FingerprintMismatch(ConfigError):
    """Artifacts on disk were produced by a different configuration."""


class DivergenceError(OtaflError, FloatingPointError):
    """The model left the finite range during a run."""

    def __init__(self, message: str, round_index: int) -> None:
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


class StepBoundViolation(OtaflError, AssertionError):
    """A noiseless normalized step exceeded eta * a * sum_k h_k b_k."""

    def __init__(self, message: str, round_index: int) -> None:
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index
