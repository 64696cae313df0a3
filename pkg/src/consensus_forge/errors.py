"""Exception and warning types shared across the package."""


class ConsensusForgeError(Exception):
    """Base class for all errors raised by consensus_forge."""


class DimensionMismatch(ConsensusForgeError, ValueError):
    pass


class NotPositiveDefinite(ConsensusForgeError):
    """The grounded matrix L + G has a non-positive eigenvalue."""


class DegenerateNetwork(NotPositiveDefinite):
    """Synthesis refused: graph disconnected or no agent pinned to the leader."""


class NumericalFailure(ConsensusForgeError):
    pass


class BlockNotNegativeDefinite(ConsensusForgeError):
    pass


class Infeasible(ConsensusForgeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CertificateRejected(ConsensusForgeError):
    pass


class LiftRejected(ConsensusForgeError):
    def __init__(self, message, margins=None):
        super().__init__(message)
        self.margins = margins


class MissingInitialState(ConsensusForgeError):
    pass


class NumericalBlowup(ConsensusForgeError):
    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


class UnsupportedOperator(ConsensusForgeError):
    pass


class ConfigError(ConsensusForgeError):
    """Schema or dimension violation; ``path`` locates the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class SpecHashMismatch(ConsensusForgeError):
    pass


class HorizonWarning(UserWarning):
    """Simulated horizon too short for the truncated cost to approximate J."""
