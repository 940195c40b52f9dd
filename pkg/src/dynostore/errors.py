"""Exception hierarchy shared across the store.

Every error carries a stable ``code`` string that survives the wire: servers
map exceptions to HTTP responses carrying the code, clients map the code back
to the same exception class, and the CLI maps classes to exit codes.
"""

from __future__ import annotations


class DynoStoreError(Exception):
    """Base class for every error raised by this package."""

    code = "Internal"


# --- paths -----------------------------------------------------------------

class EmptyPathError(DynoStoreError):
    code = "EmptyPath"


class IllegalCharacterError(DynoStoreError):
    code = "IllegalCharacter"


class PathTooLongError(DynoStoreError):
    code = "PathTooLong"


# --- coding and chunk framing ----------------------------------------------

class InvalidParamsError(DynoStoreError):
    code = "InvalidParams"


class BadMagicError(DynoStoreError):
    code = "BadMagic"


class TruncatedError(DynoStoreError):
    code = "Truncated"


class InconsistentHeadersError(DynoStoreError):
    code = "InconsistentHeaders"


class NotEnoughChunksError(DynoStoreError):
    code = "NotEnoughChunks"


class HashMismatchError(DynoStoreError):
    code = "HashMismatch"

    def __init__(self, message: str, expected: bytes = b"", actual: bytes = b""):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


# --- placement ---------------------------------------------------------------

class InsufficientCapacityError(DynoStoreError):
    code = "InsufficientCapacity"


class NoFeasibleContainerError(DynoStoreError):
    code = "NoFeasibleContainer"


class NotEnoughContainersError(DynoStoreError):
    code = "NotEnoughContainers"


# --- storage containers ------------------------------------------------------

class NotFoundError(DynoStoreError):
    code = "NotFound"


class OutOfSpaceError(DynoStoreError):
    code = "OutOfSpace"


class BackendFailureError(DynoStoreError):
    code = "BackendFailure"


class ContainerUnavailableError(DynoStoreError):
    """Transport-level failure: the container did not answer at all."""

    code = "ContainerUnavailable"


# --- auth -------------------------------------------------------------------

class UnauthorizedError(DynoStoreError):
    code = "Unauthorized"


class BadCredentialsError(UnauthorizedError):
    code = "BadCredentials"


class PermissionDeniedError(DynoStoreError):
    code = "PermissionDenied"


# --- namespace / metadata -----------------------------------------------------

class ParentNotFoundError(DynoStoreError):
    code = "ParentNotFound"


class CollectionNotFoundError(DynoStoreError):
    code = "CollectionNotFound"


class ScopeNotFoundError(DynoStoreError):
    code = "ScopeNotFound"


class AlreadyExistsError(DynoStoreError):
    code = "AlreadyExists"


class VersionExpiredError(DynoStoreError):
    code = "VersionExpired"


class ConsensusFailedError(DynoStoreError):
    code = "ConsensusFailed"


# --- management ---------------------------------------------------------------

class UnknownContainerError(DynoStoreError):
    code = "UnknownContainer"


class ContainerWriteFailedError(DynoStoreError):
    code = "ContainerWriteFailed"


# --- client -------------------------------------------------------------------

class EncryptionKeyMissingError(DynoStoreError):
    code = "EncryptionKeyMissing"


class WrongKeyError(DynoStoreError):
    code = "WrongKey"


class BadHandleError(DynoStoreError):
    code = "BadHandle"


# --- harness ------------------------------------------------------------------

class ScenarioInvalidError(DynoStoreError):
    code = "ScenarioInvalid"


class InvariantViolationError(DynoStoreError):
    code = "InvariantViolation"


def _build_registry() -> dict[str, type[DynoStoreError]]:
    reg: dict[str, type[DynoStoreError]] = {}
    stack = [DynoStoreError]
    while stack:
        cls = stack.pop()
        reg[cls.code] = cls
        stack.extend(cls.__subclasses__())
    return reg


_REGISTRY = _build_registry()


def error_for_code(code: str, message: str) -> DynoStoreError:
    """Rebuild the exception a server reported from its wire code."""
    cls = _REGISTRY.get(code, DynoStoreError)
    return cls(message)
