"""
Error types for the tactile Seq2Seq stack.

Library code raises these; the command-line boundary turns them into
machine-readable error records (see ``error_record``).
"""

from datetime import datetime
from typing import Any, Dict, Optional


class Seq2SeqError(Exception):
    """Base class for every error raised by this package."""

    fix_suggestion: str = "Check the inputs of the failing operation"


class ShapeError(Seq2SeqError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""

    fix_suggestion = "Check tensor shapes; only leading-batch and scalar broadcasting is supported"


class DomainError(Seq2SeqError, ValueError):
    """Input lies outside the mathematical domain of an operation."""

    fix_suggestion = "Make sure inputs to log are strictly positive"


class ContractError(Seq2SeqError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(Seq2SeqError, ValueError):
    """Configuration file or values are invalid."""

    fix_suggestion = "Validate the JSON config against the documented fields; unknown keys are rejected"


class DatasetParseError(Seq2SeqError, ValueError):
    """A dataset or replay file line could not be parsed."""

    fix_suggestion = "Inspect the reported line of the JSON-lines file"

    def __init__(self, message: str, line_number: int, path: Optional[str] = None):
        self.line_number = line_number
        self.path = path
        where = f"{path}:{line_number}" if path else f"line {line_number}"
        super().__init__(f"{where}: {message}")


class DatasetVersionError(Seq2SeqError, ValueError):
    """A dataset file was written with an unsupported format version."""

    fix_suggestion = "Regenerate the dataset with the current collect-demos / dagger commands"


class CheckpointError(Seq2SeqError, ValueError):
    """A checkpoint is corrupt or does not match its configuration."""

    fix_suggestion = "Load the checkpoint together with the sidecar JSON written next to it"


def error_record(exc: BaseException, command: Optional[str] = None) -> Dict[str, Any]:
    """Build the machine-readable record emitted when a command fails.

    Args:
        exc: The exception that terminated the command
        command: CLI command name, if known

    Returns:
        JSON-serializable dictionary describing the failure
    """
    record: Dict[str, Any] = {
        "status": "error",
        "error": str(exc),
        "error_type": type(exc).__name__,
        "timestamp": datetime.now().isoformat(),
        "fix_suggestion": getattr(exc, "fix_suggestion", "See the log output for details"),
    }
    if command:
        record["command"] = command
    if isinstance(exc, DatasetParseError):
        record["line_number"] = exc.line_number
    return record
