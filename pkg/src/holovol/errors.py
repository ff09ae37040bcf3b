"""Exception hierarchy shared by every holovol module.

Each class carries the CLI exit code it maps to, so the orchestrator can turn
any failure into a machine-readable error record without a lookup table.
"""

from __future__ import annotations


class HolovolError(Exception):
    exit_code = 5
    kind = "internal"


class InvalidInputError(HolovolError, ValueError):
    exit_code = 2
    kind = "invalid_input"


class WrapLimitError(InvalidInputError):
    """A droplet is tall enough that its optical phase would exceed 2*pi."""

    kind = "wrap_limit"

    def __init__(self, droplet_id: int, height: float, limit: float):
        self.droplet_id = droplet_id
        self.height = height
        self.limit = limit
        super().__init__(
            f"droplet {droplet_id}: cap height {height:.4g} um reaches the "
            f"phase-wrap limit {limit:.4g} um"
        )


class DegenerateFrameError(HolovolError, ValueError):
    exit_code = 4
    kind = "degenerate_frame"


class NoContentError(HolovolError):
    exit_code = 4
    kind = "no_content"


class ContractViolationError(HolovolError, RuntimeError):
    exit_code = 5
    kind = "contract_violation"


class GeometryInconsistentError(HolovolError, ValueError):
    exit_code = 5
    kind = "geometry_inconsistent"


class InsufficientDataError(HolovolError, ValueError):
    exit_code = 4
    kind = "insufficient_data"


class DegenerateTestError(HolovolError, ValueError):
    exit_code = 4
    kind = "degenerate_test"


class ConfigError(HolovolError, ValueError):
    """Schema violation in a config, scene or summary file.

    ``path`` is the dotted location of the offending field, when known.
    """

    exit_code = 2
    kind = "config"

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class PipelineIOError(HolovolError, OSError):
    exit_code = 3
    kind = "io"
