"""Exception types shared across the package."""


class GovernanceError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(GovernanceError):
    """A catalog, rule set, or parameter block is malformed."""


class ConfigValidationError(ConfigurationError):
    """A config document failed validation.

    Collects every problem found, not just the first, so one load
    attempt reports everything that needs fixing.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"config validation failed:\n{lines}")


class InsufficientDataError(GovernanceError):
    """Not enough observations to compute the requested quantity."""


class EstimationError(GovernanceError):
    """An estimator could not produce usable output from its input."""


class ScheduleExhaustedError(GovernanceError):
    """The alpha-spending schedule has no fraction left at this decision time."""


class UndefinedCapError(GovernanceError):
    """The exposure cap is undefined for the given inputs."""


class AuditIntegrityError(GovernanceError):
    """An audit log sequence was broken or a record failed replay checks."""
