"""Exception hierarchy shared across the toolkit.

The CLI maps ``SolverViolationError`` to exit code 3 and every other
``PruneError`` to exit code 2.
"""


class PruneError(Exception):
    """Base class for all toolkit errors."""


class DataError(PruneError):
    """Malformed or inconsistent input data (files, tensors, configs)."""


class ValidationError(DataError):
    """A value violates a documented invariant (bad distribution, bad config)."""


class StructuralError(PruneError):
    """A network description is internally inconsistent (channel chain, shapes)."""


class SingularSystemError(PruneError):
    """A linear system without regularization turned out singular."""


class SolverViolationError(PruneError):
    """The alternating solver broke its own descent guarantee; always a bug."""
