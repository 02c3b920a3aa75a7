"""Exception hierarchy shared across the package."""


class QuboplanError(Exception):
    """Base class for all package-specific errors."""


class WorkloadError(QuboplanError):
    """Malformed or semantically invalid workload document."""


class CostModelError(QuboplanError):
    """Cost-model precondition violated (disconnected subset, invalid plan)."""


class OracleLimitError(QuboplanError):
    """Exact optimizer invoked above its configured relation limit."""


class SamplerError(QuboplanError):
    """Sampler misuse: empty sample sets, oversized exhaustive sweeps."""


class TransportError(QuboplanError):
    """Remote sampler endpoint unreachable or connection dropped."""


class ProtocolError(QuboplanError):
    """Remote sampler returned a response that does not match the wire schema."""


class PartitionError(QuboplanError):
    """Problem cannot be partitioned under the given capacity."""


class EmbeddingError(QuboplanError):
    """No valid placement of logical variables onto the hardware graph."""


class HintParseError(QuboplanError):
    """Plan-hint text does not conform to the Leading grammar."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
