"""Exception taxonomy shared across the codec.

Exit-code mapping (used by the CLI): ConfigError -> 2,
ArtifactMissingError -> 3, ContractError and subclasses -> 4.
"""


class DualCodecError(Exception):
    """Base class for all codec errors."""


class ConfigError(DualCodecError):
    """Invalid configuration; message names the offending field path."""


class ArtifactMissingError(DualCodecError):
    """A required checkpoint / results file is absent."""


class ContractError(DualCodecError):
    """An operation precondition was violated (shapes, ranges, state)."""


class FormatError(ContractError):
    """Malformed bitstream container (magic, version, truncation)."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedStreamError(FormatError):
    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class DecodeError(FormatError):
    """Entropy-coded payload could not be decoded."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class DigestMismatchError(ContractError):
    """Checkpoint digests disagree with what the consumer expects."""


class FreezeViolationError(ContractError):
    """Frozen expert weights changed during a training run."""
