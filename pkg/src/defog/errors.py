"""Exception hierarchy shared by every layer of the runtime."""


class DefogError(Exception):
    """Base class for all runtime errors raised by defog."""


class DimensionError(DefogError, ValueError):
    """Array shapes do not fit the requested operation."""


class ConfigurationError(DefogError, ValueError):
    """Invalid topology, weight scheme, launcher environment or experiment config."""


class UsageError(DefogError, RuntimeError):
    """An API was called out of protocol (consumed handle, unknown window, ...)."""


class NegotiationError(DefogError):
    """The coordinator rejected a collective request.

    ``ranks`` lists the offending ranks so the diagnostic can be acted on.
    """

    def __init__(self, message: str, ranks=()):
        super().__init__(message)
        self.ranks = tuple(sorted(ranks))


class ShapeMismatchError(NegotiationError):
    pass


class OpMismatchError(NegotiationError):
    pass


class TopologyMismatchError(NegotiationError):
    pass


class CommunicationError(DefogError, RuntimeError):
    """Transport failure: dead peer, protocol violation, unexpected message."""


class CancelledError(CommunicationError):
    """A blocking wait was interrupted by shutdown or by another rank failing."""


class DeadlockError(CommunicationError):
    """The simulator found every rank blocked with no message in flight."""


class StartupError(CommunicationError):
    """Peers could not be reached while establishing the fabric."""


class DivergenceError(DefogError, ArithmeticError):
    pass


class DegeneracyError(DefogError, ArithmeticError):
    pass
