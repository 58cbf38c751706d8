"""Exception types raised across the MRFGAT toolkit."""
from __future__ import annotations

from typing import Dict, Optional


class MRFGATError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class DimensionError(MRFGATError, ValueError):
    """Tensor shapes or axes do not line up."""


class ValidationError(MRFGATError, ValueError):
    """An argument, label or configuration value is out of range."""


class ContractError(MRFGATError, RuntimeError):
    """A caller broke an operation's contract."""


class DegenerateInputError(MRFGATError, ValueError):
    """Geometry without extent: identical points or zero surface area."""


class OFFParseError(MRFGATError, ValueError):
    """Malformed OFF mesh text."""

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class CacheFormatError(MRFGATError, ValueError):
    """A sample cache file is corrupt, truncated or from another version."""


class CheckpointLoadError(MRFGATError, ValueError):
    """A checkpoint file is corrupt, truncated or from another version."""


class NonFiniteLossError(MRFGATError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(
        self,
        epoch: int,
        batch_index: int,
        loss: float,
        parameter_norms: Dict[str, float],
    ) -> None:
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        self.parameter_norms = parameter_norms
        worst = sorted(parameter_norms.items(), key=lambda item: -item[1])[:5]
        norms = ", ".join(f"{name}={norm:.4g}" for name, norm in worst)
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}; "
            f"largest parameter norms: {norms}"
        )
