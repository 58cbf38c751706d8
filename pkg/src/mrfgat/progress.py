"""
Structured progress events for machine consumers.

Each event is one stdout line, ``MRFGAT_PROGRESS`` followed by a JSON object
with ``stage``, ``status`` and ``message`` keys plus any non-null extras.
"""
from __future__ import annotations

import enum
import json
from typing import Any, Union

import numpy as np

from .errors import ValidationError

PROGRESS_PREFIX = "MRFGAT_PROGRESS "


class Stage(str, enum.Enum):
    CACHE_BUILD = "cache_build"
    TRAINING = "training"
    EVALUATION = "evaluation"
    GRADCHECK = "gradcheck"
    BENCH_KNN = "bench_knn"


class Status(str, enum.Enum):
    RUNNING = "running"
    COMPLETE = "complete"
    ERROR = "error"


def _json_default(value: Any) -> Any:
    # Metrics arrive as numpy scalars and small arrays.
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def emit_progress(
    stage: Union[Stage, str],
    status: Union[Status, str],
    message: str,
    **fields: Any,
) -> None:
    """Print one machine-readable progress event alongside the human log lines."""
    try:
        stage = Stage(stage)
        status = Status(status)
    except ValueError as error:
        raise ValidationError(f"bad progress event: {error}") from error
    event = {
        "stage": stage.value,
        "status": status.value,
        "message": message,
    }
    event.update({key: value for key, value in fields.items() if value is not None})
    print(f"{PROGRESS_PREFIX}{json.dumps(event, ensure_ascii=False, default=_json_default)}")
