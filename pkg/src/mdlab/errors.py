"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
integrity failures (digest mismatches, truncated artifacts) exit 3, and
runtime failures such as training divergence exit 4.
"""


class MdlabError(Exception):
    """Base class for all package-specific errors."""


class DomainError(MdlabError, ValueError):
    """An argument lies outside its mathematical domain (e.g. t not in [0, 1])."""


class OrderingError(DomainError):
    """Two time arguments violate their required ordering (e.g. s >= t)."""


class InvalidInputError(MdlabError, ValueError):
    """Structurally invalid data, such as a clean sequence containing the mask id."""


class ConfigError(MdlabError):
    """A configuration file or object is malformed, incomplete, or inconsistent."""


class ScheduleError(MdlabError):
    """A step/token schedule is infeasible for the requested sequence length."""


class IntegrityError(MdlabError):
    """A persisted artifact fails its digest or structural check."""


class TrainingError(MdlabError):
    """Training diverged or was otherwise unable to proceed."""


class DataError(MdlabError):
    """A dataset is degenerate or unusable (e.g. single-class planner labels)."""
