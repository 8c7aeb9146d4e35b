"""Exception hierarchy shared across the package.

Each family maps to one documented CLI exit code (see cli.EXIT_CODES).
"""

from __future__ import annotations


class WxscaleError(Exception):
    """Base class for all package-specific errors."""


class InvalidGridError(WxscaleError):
    """Grid geometry violates an invariant (latitude range, spacing, ...)."""


class SchemaError(WxscaleError):
    """Channel schema is malformed or two schemas do not match."""


class NonFiniteValuesError(WxscaleError):
    """A field carries NaN or infinite values."""


class ChecksumError(WxscaleError):
    """Stored payload checksum does not match the file contents."""


class ConfigError(WxscaleError):
    """Bad configuration file or flag value; message names the key."""


class MissingTruthError(WxscaleError):
    """Truth data absent for a requested timestamp."""

    def __init__(self, timestamp: int, detail: str = ""):
        self.timestamp = timestamp
        msg = f"no truth state available at timestamp {timestamp} h"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergedRolloutError(WxscaleError):
    """A rollout produced a non-finite state; carries the first bad lead."""

    def __init__(self, ic_timestamp: int, first_bad_lead: int):
        self.ic_timestamp = ic_timestamp
        self.first_bad_lead = first_bad_lead
        super().__init__(
            f"rollout from IC {ic_timestamp} h diverged at lead {first_bad_lead} h"
        )


class PartitionError(WxscaleError):
    """Patch grid cannot be tiled by the requested layout."""


class FitError(WxscaleError):
    """A regression could not be performed on the given points."""


class NoInteriorMinimumError(FitError):
    """Quadratic stage-1 fit is not convex; no interior optimum exists."""


class JoinError(WxscaleError):
    """runs/metrics tables disagree; message lists the offending rows."""


class OutputDirError(WxscaleError):
    """Output directory exists and is non-empty; pass --force to reuse."""
