"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, bad external data
exits 2, violated internal invariants exit 3.
"""


class UsageError(ValueError):
    """Caller passed flags/arguments that cannot be acted on."""


class DataError(ValueError):
    """External data (dataset files, snapshots, configs) is malformed."""


class InvariantError(RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
