"""Exception hierarchy shared by every accordion module."""


class AccordionError(Exception):
    """Base class for all library errors."""


class DimensionError(AccordionError, ValueError):
    pass


class InputError(AccordionError, ValueError):
    pass


class ConfigError(AccordionError, ValueError):
    pass


class InfeasibleBudgetError(AccordionError):
    """No depth configuration fits inside the requested bit budget."""


class UnreachableAccuracyError(AccordionError):
    """No depth configuration reaches the requested error rate."""


class IntegrityError(AccordionError):
    """A chunk failed its CRC or length check."""

    def __init__(self, message, chunk_index=None):
        super().__init__(message)
        self.chunk_index = chunk_index


class VersionError(AccordionError):
    pass


class ProtocolError(AccordionError):
    pass
