"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (usage 1, data 2, numerical 3), so
library code should raise the most specific one that applies.
"""


class UsageError(Exception):
    """Bad command line or configuration input."""


class DataError(Exception):
    """Missing, malformed, or inconsistent dataset content."""


class NumericalError(Exception):
    """Numerical failure: non-SPD system, non-finite loss, divergence."""
