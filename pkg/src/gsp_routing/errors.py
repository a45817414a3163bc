"""Exception types shared across the package.

Each carries an ``exit_code`` so the command-line front end can map failures
to distinct process exit statuses.
"""


class GspError(Exception):
    exit_code = 1


class ConfigInvalid(GspError, ValueError):
    exit_code = 5


class NotStabilizable(GspError):
    """Arrival rate is not below the min-cut capacity of the network."""

    exit_code = 3


class InfeasibleParams(GspError, ValueError):
    """(beta, gamma) lies outside the region that certifies stability."""

    exit_code = 4


class InvalidWeights(GspError, ValueError):
    exit_code = 6


class NoCompletedJobs(GspError):
    exit_code = 7


class MissingBaseline(GspError, KeyError):
    exit_code = 8


class NoFeasibleCandidate(GspError):
    exit_code = 9
