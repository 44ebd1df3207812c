"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Exception hierarchy shared by every module. Library code raises these,
only the command line turns them into exit statuses.
"""

from typing import Any, Dict, Optional


class GoldenRPGError(Exception):
    """Base class for all failures raised by golden_rpg."""


class ShapeError(GoldenRPGError, ValueError):
    def __init__(self, operation: str, left: tuple, right: Optional[tuple] = None, detail: str = "") -> None:
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        if right is None:
            message = f"{operation}: invalid shape {self.left}"
        else:
            message = f"{operation}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonFiniteError(GoldenRPGError, ValueError):
    """NaN or Inf met where checked mode requires finite values."""


class LayoutError(GoldenRPGError, ValueError):
    """Region layout, mask partition or ratio violation."""


class ConfigError(GoldenRPGError, ValueError):
    """Invalid, unknown or missing configuration entries."""


class CheckpointError(GoldenRPGError):
    """Malformed or incompatible named-array container."""


class CorpusError(GoldenRPGError):
    """Degenerate or inconsistent training corpus."""


class MetricError(GoldenRPGError, ValueError):
    """A metric undefined for its input, such as an empty crop."""


class TrainingAborted(GoldenRPGError):
    def __init__(self, message: str, checkpoint_path: Optional[str] = None,
                 diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.diagnostics = diagnostics or {}
