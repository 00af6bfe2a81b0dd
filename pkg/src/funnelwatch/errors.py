"""Exception hierarchy.

Every error raised by the package derives from :class:`FunnelError`. Errors
that describe bad values also derive from :class:`ValueError`, and lookups of
unknown identifiers derive from :class:`KeyError`, so callers can catch either
the package root or the builtin category.
"""


class FunnelError(Exception):
    """Base class for all package errors."""


class InvariantError(FunnelError, ValueError):
    """A domain object was constructed with a violated invariant."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SchemaError(FunnelError, ValueError):
    """Input does not match the declared schema (missing column, unknown label)."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class InvalidCount(SchemaError):
    """A count column holds a negative or non-integer value."""


class DuplicateCell(FunnelError, ValueError):
    """Two input rows describe the same (provider, diagnosis, stratum) cell."""

    def __init__(self, first_row, second_row, key=None):
        self.first_row = first_row
        self.second_row = second_row
        self.key = key
        super().__init__(f"duplicate cell {key!r} on rows {first_row} and {second_row}")


class UnknownIdentifier(FunnelError, KeyError):
    def __init__(self, kind, identifier):
        self.kind = kind
        self.identifier = identifier
        super().__init__(f"unknown {kind} {identifier!r}")

    def __str__(self):
        return self.args[0]


class InsufficientCount(FunnelError, ValueError):
    """A re-attribution asks for more patients than the source cell holds."""


class TransformError(FunnelError, ValueError):
    """A transform spec is internally inconsistent."""


class EmptySpecialty(FunnelError, ValueError):
    def __init__(self, specialty_id):
        self.specialty_id = specialty_id
        super().__init__(f"specialty {specialty_id!r} has zero patients in every stratum")


class NoTreatingProviders(FunnelError, ValueError):
    pass


class InconsistentStratum(FunnelError, ValueError):
    """Observed patients exceed the allocated population in a stratum."""


class InvalidPopulation(FunnelError, ValueError):
    pass


class InconsistentCounts(FunnelError, ValueError):
    """Observed or expected count exceeds the population beyond what correction absorbs."""


class InsufficientProviders(FunnelError, ValueError):
    pass


class InvalidStandardError(FunnelError, ValueError):
    pass


class InvalidGrid(FunnelError, ValueError):
    pass


class InvalidScenario(FunnelError, ValueError):
    pass
