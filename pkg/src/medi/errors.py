"""Exception types shared across the package.

DataError covers malformed or missing input data (manifests, frames, flow
files); NumericalError covers non-finite values detected mid-computation.
The CLI maps them to distinct exit codes.
"""


class MediError(Exception):
    """Base class for package-specific errors."""


class DataError(MediError):
    """Input data is missing, malformed, or violates a declared invariant."""


class NumericalError(MediError):
    """A computation produced non-finite values or diverged."""
