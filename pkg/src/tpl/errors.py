"""Exception taxonomy shared by every module.

``exit_code`` follows the CLI contract: 2 for configuration problems,
3 for data/validation problems, 4 for I/O failures (mapped from OSError
by the CLI itself).
"""


class TplError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(TplError):
    """Invalid knob values, infeasible quotas, or a strategy/data mismatch."""

    exit_code = 2


class BoundsError(ConfigError):
    """A count or index parameter falls outside its valid range."""


class DataError(TplError):
    """Required data is missing or inconsistent with the request."""

    exit_code = 3


class ShapeError(DataError):
    """Operands disagree on dimensions or layout."""


class DegenerateInputError(DataError):
    """Input admits no meaningful answer (constant vector, empty batch)."""


class ContractError(DataError):
    """A caller violated an operation contract, e.g. dropped a non-visual token."""


class TraceError(DataError):
    """Base class for trace-file problems."""


class TraceVersionError(TraceError):
    """Unknown or corrupted trace format version."""


class TraceTruncatedError(TraceError):
    """The byte stream ends before the header-declared arrays are complete."""


class TraceValidationError(TraceError):
    """A trace violates a structural invariant; message lists the violations."""
