"""Exception hierarchy; every class knows the CLI exit code it maps to."""

from __future__ import annotations


class HetLocoError(Exception):
    exit_code = 1


class ConfigError(HetLocoError):
    exit_code = 2


class DimensionError(HetLocoError, ValueError):
    pass


class DegenerateBasisError(HetLocoError):
    pass


class NonFiniteError(HetLocoError, ValueError):
    pass


class PartitionError(HetLocoError):
    pass


class SyncError(HetLocoError):
    pass


class WireFormatError(HetLocoError):
    pass


class BiasIdentityError(HetLocoError):
    pass


class CorpusTooSmallError(HetLocoError):
    exit_code = 3


class NumericalFailure(HetLocoError):
    """Non-finite values inside a forward/backward pass or a loss."""

    exit_code = 4

    def __init__(self, message: str, stage: int | None = None, replica: int | None = None):
        self.detail = message
        self.stage = stage
        self.replica = replica
        where = []
        if replica is not None:
            where.append(f"replica {replica}")
        if stage is not None:
            where.append(f"stage {stage}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")

    def at_replica(self, replica: int) -> "NumericalFailure":
        return NumericalFailure(self.detail, stage=self.stage, replica=replica)


class VerificationError(HetLocoError):
    exit_code = 5
