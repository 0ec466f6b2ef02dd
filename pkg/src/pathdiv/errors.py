"""Exception hierarchy shared by all modules."""


class PathDivError(Exception):
    """Base class for errors raised by pathdiv."""


class DimensionError(PathDivError, ValueError):
    """Array shapes of fields, points or vectors do not agree."""


class SpanningError(PathDivError):
    """The spanning family fails to span the tangent space (metric singular)."""


class NotInBundleError(PathDivError):
    """A vector or field that must lie in E = span{X_i} does not."""


class ModeError(PathDivError):
    """An operation was requested on a model whose mode does not support it."""


class SimulationError(PathDivError):
    """Path simulation left the admissible region or became singular."""


class ConvergenceError(PathDivError):
    """An iterative step failed to converge."""


class ConfigError(PathDivError, ValueError):
    """Invalid scenario configuration.

    ``problems`` lists every violated constraint, one message per entry.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
